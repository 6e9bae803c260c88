//! Composite blocks: the concatenate block (Co-Block), the residual identity
//! block, the MultiRes block and the decoder block that wraps one of them.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{bn_param_count, conv_param_count, BnParams, ConvParams, Context, Initializer, ParamStore};
use crate::scalar::Scalar;

/// Order of activation and batch normalization inside a conv stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StageOrder {
    /// conv → ReLU → BN
    #[default]
    ActThenNorm,
    /// conv → BN → ReLU
    NormThenAct,
}

impl StageOrder {
    pub fn from_bn_before_act(bn_before_act: bool) -> Self {
        if bn_before_act {
            StageOrder::NormThenAct
        } else {
            StageOrder::ActThenNorm
        }
    }

    fn apply<T: Scalar>(self, ctx: &mut Context<'_, T>, x: Var, bn: &BnParams) -> Result<Var> {
        match self {
            StageOrder::ActThenNorm => {
                let a = ctx.relu(x);
                ctx.bn(a, bn)
            }
            StageOrder::NormThenAct => {
                let n = ctx.bn(x, bn)?;
                Ok(ctx.relu(n))
            }
        }
    }
}

fn stage<T: Scalar>(ctx: &mut Context<'_, T>, x: Var, conv: &ConvParams, bn: &BnParams, order: StageOrder) -> Result<Var> {
    let c = ctx.conv(x, conv)?;
    order.apply(ctx, c, bn)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Co,
    Identity,
    MultiRes,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Co => "co",
            BlockKind::Identity => "identity",
            BlockKind::MultiRes => "multires",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "co" => Some(BlockKind::Co),
            "identity" => Some(BlockKind::Identity),
            "multires" => Some(BlockKind::MultiRes),
            _ => None,
        }
    }
}

/// Three 3×3 stages with F, 2F and 4F filters. Output is
/// `concat(concat(x1, x2), x3)`, i.e. 7F channels.
#[derive(Clone, Debug)]
pub struct CoBlockParams {
    pub convs: [ConvParams; 3],
    pub bns: [BnParams; 3],
    pub filters: usize,
    pub order: StageOrder,
}

impl CoBlockParams {
    pub fn new<T: Scalar>(
        init: &mut Initializer,
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        filters: usize,
        order: StageOrder,
    ) -> Self {
        let f = filters;
        let c1 = init.conv(store, &format!("{name}.conv1"), cin, f, 3);
        let b1 = init.bn(store, &format!("{name}.bn1"), f);
        let c2 = init.conv(store, &format!("{name}.conv2"), f, 2 * f, 3);
        let b2 = init.bn(store, &format!("{name}.bn2"), 2 * f);
        let c3 = init.conv(store, &format!("{name}.conv3"), 3 * f, 4 * f, 3);
        let b3 = init.bn(store, &format!("{name}.bn3"), 4 * f);
        CoBlockParams { convs: [c1, c2, c3], bns: [b1, b2, b3], filters, order }
    }

    pub fn out_channels(&self) -> usize {
        7 * self.filters
    }

    pub fn param_count_formula(cin: usize, f: usize) -> usize {
        conv_param_count(cin, f, 3)
            + bn_param_count(f)
            + conv_param_count(f, 2 * f, 3)
            + bn_param_count(2 * f)
            + conv_param_count(3 * f, 4 * f, 3)
            + bn_param_count(4 * f)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Context<'_, T>, x: Var) -> Result<Var> {
        let x1 = stage(ctx, x, &self.convs[0], &self.bns[0], self.order)?;
        let x2 = stage(ctx, x1, &self.convs[1], &self.bns[1], self.order)?;
        let c1 = ctx.tape.concat_channels(&[x1, x2])?;
        let x3 = stage(ctx, c1, &self.convs[2], &self.bns[2], self.order)?;
        ctx.tape.concat_channels(&[c1, x3])
    }
}

/// Residual unit: `ReLU(BN(conv_b(ReLU(BN(conv_a(x))))) + skip)`, where the
/// skip is `x` itself or a 1×1 projection when channel counts differ.
#[derive(Clone, Debug)]
pub struct IdentityBlockParams {
    pub conv_a: ConvParams,
    pub bn_a: BnParams,
    pub conv_b: ConvParams,
    pub bn_b: BnParams,
    pub projection: Option<ConvParams>,
    pub filters: usize,
}

impl IdentityBlockParams {
    pub fn new<T: Scalar>(init: &mut Initializer, store: &mut ParamStore<T>, name: &str, cin: usize, filters: usize) -> Self {
        let conv_a = init.conv(store, &format!("{name}.conv_a"), cin, filters, 3);
        let bn_a = init.bn(store, &format!("{name}.bn_a"), filters);
        let conv_b = init.conv(store, &format!("{name}.conv_b"), filters, filters, 3);
        let bn_b = init.bn(store, &format!("{name}.bn_b"), filters);
        let projection = (cin != filters).then(|| init.conv(store, &format!("{name}.proj"), cin, filters, 1));
        IdentityBlockParams { conv_a, bn_a, conv_b, bn_b, projection, filters }
    }

    pub fn out_channels(&self) -> usize {
        self.filters
    }

    pub fn param_count_formula(cin: usize, f: usize) -> usize {
        let proj = if cin != f { conv_param_count(cin, f, 1) } else { 0 };
        conv_param_count(cin, f, 3) + bn_param_count(f) + conv_param_count(f, f, 3) + bn_param_count(f) + proj
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Context<'_, T>, x: Var) -> Result<Var> {
        let a = ctx.conv(x, &self.conv_a)?;
        let a = ctx.bn(a, &self.bn_a)?;
        let a = ctx.relu(a);
        let b = ctx.conv(a, &self.conv_b)?;
        let y = ctx.bn(b, &self.bn_b)?;
        let skip = match &self.projection {
            Some(p) => ctx.conv(x, p)?,
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        Ok(ctx.relu(sum))
    }
}

/// Stage widths `⌊αF/6⌋, ⌊αF/3⌋, ⌊αF/2⌋`.
pub fn multires_widths(filters: usize, alpha: f64) -> [usize; 3] {
    let af = alpha * filters as f64;
    // nudge guards against α·F/k landing a hair under an integer
    let w = |k: f64| ((af / k) + 1e-9).floor() as usize;
    [w(6.0), w(3.0), w(2.0)]
}

/// Three chained 3×3 stages concatenated, plus a 1×1 residual path; BN on
/// the sum.
#[derive(Clone, Debug)]
pub struct MultiResBlockParams {
    pub convs: [ConvParams; 3],
    pub bns: [BnParams; 3],
    pub residual: ConvParams,
    pub out_bn: BnParams,
    pub widths: [usize; 3],
    pub order: StageOrder,
}

impl MultiResBlockParams {
    pub fn new<T: Scalar>(
        init: &mut Initializer,
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        filters: usize,
        alpha: f64,
        order: StageOrder,
    ) -> Result<Self> {
        let widths = multires_widths(filters, alpha);
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MultiRes block {name}: α={alpha}, F={filters} gives an empty stage {widths:?}"
            )));
        }
        let [w1, w2, w3] = widths;
        let c1 = init.conv(store, &format!("{name}.conv1"), cin, w1, 3);
        let b1 = init.bn(store, &format!("{name}.bn1"), w1);
        let c2 = init.conv(store, &format!("{name}.conv2"), w1, w2, 3);
        let b2 = init.bn(store, &format!("{name}.bn2"), w2);
        let c3 = init.conv(store, &format!("{name}.conv3"), w2, w3, 3);
        let b3 = init.bn(store, &format!("{name}.bn3"), w3);
        let total = w1 + w2 + w3;
        let residual = init.conv(store, &format!("{name}.residual"), cin, total, 1);
        let out_bn = init.bn(store, &format!("{name}.bn_out"), total);
        Ok(MultiResBlockParams { convs: [c1, c2, c3], bns: [b1, b2, b3], residual, out_bn, widths, order })
    }

    pub fn out_channels(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn param_count_formula(cin: usize, f: usize, alpha: f64) -> usize {
        let [w1, w2, w3] = multires_widths(f, alpha);
        let total = w1 + w2 + w3;
        conv_param_count(cin, w1, 3)
            + bn_param_count(w1)
            + conv_param_count(w1, w2, 3)
            + bn_param_count(w2)
            + conv_param_count(w2, w3, 3)
            + bn_param_count(w3)
            + conv_param_count(cin, total, 1)
            + bn_param_count(total)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Context<'_, T>, x: Var) -> Result<Var> {
        let s1 = stage(ctx, x, &self.convs[0], &self.bns[0], self.order)?;
        let s2 = stage(ctx, s1, &self.convs[1], &self.bns[1], self.order)?;
        let s3 = stage(ctx, s2, &self.convs[2], &self.bns[2], self.order)?;
        let main = ctx.tape.concat_channels(&[s1, s2, s3])?;
        let res = ctx.conv(x, &self.residual)?;
        let sum = ctx.tape.add(main, res)?;
        self.order.apply(ctx, sum, &self.out_bn)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Co(CoBlockParams),
    Identity(IdentityBlockParams),
    MultiRes(MultiResBlockParams),
}

/// Hyper-parameters shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockOptions {
    pub alpha: f64,
    pub order: StageOrder,
}

impl Block {
    pub fn new<T: Scalar>(
        kind: BlockKind,
        init: &mut Initializer,
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        filters: usize,
        opts: BlockOptions,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Co => Block::Co(CoBlockParams::new(init, store, name, cin, filters, opts.order)),
            BlockKind::Identity => Block::Identity(IdentityBlockParams::new(init, store, name, cin, filters)),
            BlockKind::MultiRes => {
                Block::MultiRes(MultiResBlockParams::new(init, store, name, cin, filters, opts.alpha, opts.order)?)
            }
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Co(_) => BlockKind::Co,
            Block::Identity(_) => BlockKind::Identity,
            Block::MultiRes(_) => BlockKind::MultiRes,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Co(b) => b.out_channels(),
            Block::Identity(b) => b.out_channels(),
            Block::MultiRes(b) => b.out_channels(),
        }
    }

    pub fn out_channels_formula(kind: BlockKind, filters: usize, alpha: f64) -> usize {
        match kind {
            BlockKind::Co => 7 * filters,
            BlockKind::Identity => filters,
            BlockKind::MultiRes => multires_widths(filters, alpha).iter().sum(),
        }
    }

    pub fn param_count_formula(kind: BlockKind, cin: usize, filters: usize, alpha: f64) -> usize {
        match kind {
            BlockKind::Co => CoBlockParams::param_count_formula(cin, filters),
            BlockKind::Identity => IdentityBlockParams::param_count_formula(cin, filters),
            BlockKind::MultiRes => MultiResBlockParams::param_count_formula(cin, filters, alpha),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Context<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Co(b) => b.forward(ctx, x),
            Block::Identity(b) => b.forward(ctx, x),
            Block::MultiRes(b) => b.forward(ctx, x),
        }
    }
}

/// Decoder level: 3×3 conv on the upsampled deeper output, fusion by
/// concatenation with whichever skips the level uses, an inner block, and
/// a 1×1 projection of the fused features added to the block output.
#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    pub up_conv: ConvParams,
    pub inner: Block,
    pub projection: ConvParams,
    pub fused_channels: usize,
}

impl DecoderBlockParams {
    /// `skip_channels` lists the channel counts of the skip inputs in fusion
    /// order (encoder output first, then the pooled shallower output).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Initializer,
        store: &mut ParamStore<T>,
        name: &str,
        deeper_channels: usize,
        skip_channels: &[usize],
        kind: BlockKind,
        filters: usize,
        opts: BlockOptions,
    ) -> Result<Self> {
        let up_conv = init.conv(store, &format!("{name}.up_conv"), deeper_channels, filters, 3);
        let fused = skip_channels.iter().sum::<usize>() + filters;
        let inner = Block::new(kind, init, store, &format!("{name}.inner"), fused, filters, opts)?;
        let projection = init.conv(store, &format!("{name}.proj"), fused, inner.out_channels(), 1);
        Ok(DecoderBlockParams { up_conv, inner, projection, fused_channels: fused })
    }

    pub fn out_channels(&self) -> usize {
        self.inner.out_channels()
    }

    pub fn param_count_formula(
        deeper_channels: usize,
        skip_channels: &[usize],
        kind: BlockKind,
        filters: usize,
        alpha: f64,
    ) -> usize {
        let fused = skip_channels.iter().sum::<usize>() + filters;
        let out = Block::out_channels_formula(kind, filters, alpha);
        conv_param_count(deeper_channels, filters, 3)
            + Block::param_count_formula(kind, fused, filters, alpha)
            + conv_param_count(fused, out, 1)
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Context<'_, T>,
        deeper: Var,
        encoder_skip: Option<Var>,
        pooled_skip: Option<Var>,
    ) -> Result<Var> {
        let up = ctx.tape.upsample2x(deeper)?;
        let u = ctx.conv(up, &self.up_conv)?;
        let target = ctx.tape.shape(u).dims()[2..].to_vec();
        let mut parts = Vec::with_capacity(3);
        for (label, skip) in [("encoder skip", encoder_skip), ("pooled skip", pooled_skip)] {
            if let Some(s) = skip {
                let dims = ctx.tape.shape(s).nchw_dims("decoder")?;
                if [dims.2, dims.3] != target[..] {
                    return Err(Error::shape(
                        "decoder",
                        format!("{label} is {}×{} but the upsampled input is {}×{}", dims.2, dims.3, target[0], target[1]),
                    ));
                }
                parts.push(s);
            }
        }
        let fused = if parts.is_empty() {
            u
        } else {
            parts.push(u);
            ctx.tape.concat_channels(&parts)?
        };
        let y = self.inner.forward(ctx, fused)?;
        let proj = ctx.conv(fused, &self.projection)?;
        ctx.tape.add(proj, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, Tape};
    use crate::nn::BnConfig;
    use crate::tensor::Tensor;

    const OPTS: BlockOptions = BlockOptions { alpha: 1.67, order: StageOrder::ActThenNorm };

    fn run<T: Scalar>(
        store: &ParamStore<T>,
        mode: Mode,
        input: Tensor<T>,
        f: impl FnOnce(&mut Context<'_, T>, Var) -> Result<Var>,
    ) -> Tensor<T> {
        let mut tape = Tape::new();
        let mut ctx = Context::new(&mut tape, store, mode, BnConfig::default(), 0);
        let x = ctx.tape.constant(input);
        let y = f(&mut ctx, x).unwrap();
        drop(ctx);
        tape.value(y).clone()
    }

    fn zero_weights(store: &mut ParamStore<f32>) {
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.ends_with(".weight")).collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn co_block_shape_and_count() {
        let mut store = ParamStore::<f32>::new();
        let b = CoBlockParams::new(&mut Initializer::new(1), &mut store, "e1", 1, 16, StageOrder::ActThenNorm);
        assert_eq!(store.trainable_count(), 32_736);
        assert_eq!(CoBlockParams::param_count_formula(1, 16), 32_736);
        let out = run(&store, Mode::Train, Tensor::ones([1, 1, 32, 32]), |c, x| b.forward(c, x));
        assert_eq!(out.dims(), &[1, 112, 32, 32]);
    }

    #[test]
    fn co_block_seven_f_for_every_level() {
        for f in [16, 32, 64, 128, 256] {
            assert_eq!(Block::out_channels_formula(BlockKind::Co, f, 1.67), 7 * f);
        }
        for f in [2, 3, 5] {
            let mut store = ParamStore::<f32>::new();
            let b = CoBlockParams::new(&mut Initializer::new(1), &mut store, "c", 3, f, StageOrder::ActThenNorm);
            let out = run(&store, Mode::Train, Tensor::ones([2, 3, 4, 4]), |c, x| b.forward(c, x));
            assert_eq!(out.dims(), &[2, 7 * f, 4, 4]);
            assert_eq!(store.trainable_count(), CoBlockParams::param_count_formula(3, f));
        }
    }

    #[test]
    fn co_block_zero_input_gives_zero() {
        let mut store = ParamStore::<f32>::new();
        let b = CoBlockParams::new(&mut Initializer::new(4), &mut store, "c", 2, 4, StageOrder::ActThenNorm);
        let out = run(&store, Mode::Train, Tensor::zeros([1, 2, 8, 8]), |c, x| b.forward(c, x));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_zero_main_path_is_relu() {
        let mut store = ParamStore::<f32>::new();
        let b = IdentityBlockParams::new(&mut Initializer::new(2), &mut store, "id", 3, 3);
        assert!(b.projection.is_none());
        zero_weights(&mut store);
        let data: Vec<f32> = (0..3 * 16).map(|i| (i as f32 - 20.0) * 0.1).collect();
        let input = Tensor::from_vec([1, 3, 4, 4], data).unwrap();
        let out = run(&store, Mode::Train, input.clone(), |c, x| b.forward(c, x));
        assert_eq!(out, input.map(|v| v.max(0.0)));
    }

    #[test]
    fn identity_block_projects_mismatched_channels() {
        let mut store = ParamStore::<f32>::new();
        let b = IdentityBlockParams::new(&mut Initializer::new(2), &mut store, "e3", 224, 64);
        assert!(b.projection.is_some());
        assert_eq!(store.trainable_count(), IdentityBlockParams::param_count_formula(224, 64));
        let out = run(&store, Mode::Train, Tensor::ones([1, 224, 4, 6]), |c, x| b.forward(c, x));
        assert_eq!(out.dims(), &[1, 64, 4, 6]);
    }

    #[test]
    fn multires_widths_for_f256() {
        assert_eq!(multires_widths(256, 1.67), [71, 142, 213]);
        assert_eq!(Block::out_channels_formula(BlockKind::MultiRes, 256, 1.67), 426);
    }

    #[test]
    fn multires_enumerated_shapes_match_widths() {
        let mut store = ParamStore::<f32>::new();
        let b = MultiResBlockParams::new(&mut Initializer::new(3), &mut store, "e5", 896, 256, 1.67, StageOrder::ActThenNorm)
            .unwrap();
        let dims = |id| store.get(id).value.dims().to_vec();
        assert_eq!(dims(b.convs[0].weight), vec![71, 896, 3, 3]);
        assert_eq!(dims(b.convs[1].weight), vec![142, 71, 3, 3]);
        assert_eq!(dims(b.convs[2].weight), vec![213, 142, 3, 3]);
        assert_eq!(dims(b.residual.weight), vec![426, 896, 1, 1]);
        assert_eq!(store.trainable_count(), MultiResBlockParams::param_count_formula(896, 256, 1.67));
    }

    #[test]
    fn multires_zero_residual_is_main_path_only() {
        let mut store = ParamStore::<f32>::new();
        let b = MultiResBlockParams::new(&mut Initializer::new(5), &mut store, "m", 2, 12, 1.67, StageOrder::ActThenNorm)
            .unwrap();
        store.value_mut(b.residual.weight).data_mut().fill(0.0);
        let data: Vec<f32> = (0..2 * 2 * 36).map(|i| ((i * 7 % 13) as f32) * 0.1 - 0.5).collect();
        let input = Tensor::from_vec([2, 2, 6, 6], data).unwrap();
        let out = run(&store, Mode::Train, input.clone(), |c, x| b.forward(c, x));

        let reference = run(&store, Mode::Train, input, |ctx, x| {
            let s1 = stage(ctx, x, &b.convs[0], &b.bns[0], b.order)?;
            let s2 = stage(ctx, s1, &b.convs[1], &b.bns[1], b.order)?;
            let s3 = stage(ctx, s2, &b.convs[2], &b.bns[2], b.order)?;
            let main = ctx.tape.concat_channels(&[s1, s2, s3])?;
            let r = ctx.relu(main);
            ctx.bn(r, &b.out_bn)
        });
        assert_eq!(out.dims(), &[2, 3 + 6 + 10, 6, 6]);
        for (a, r) in out.data().iter().zip(reference.data()) {
            assert!((a - r).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_single_input_doubles_resolution() {
        let mut store = ParamStore::<f32>::new();
        let d = DecoderBlockParams::new(&mut Initializer::new(6), &mut store, "d3", 10, &[], BlockKind::Identity, 4, OPTS)
            .unwrap();
        assert_eq!(d.fused_channels, 4);
        let out = run(&store, Mode::Train, Tensor::ones([1, 10, 3, 5]), |c, x| d.forward(c, x, None, None));
        assert_eq!(out.dims(), &[1, 4, 6, 10]);
        assert_eq!(store.trainable_count(), DecoderBlockParams::param_count_formula(10, &[], BlockKind::Identity, 4, 1.67));
    }

    #[test]
    fn decoder_two_inputs_fuse_encoder_then_upsampled() {
        let mut store = ParamStore::<f32>::new();
        let d = DecoderBlockParams::new(&mut Initializer::new(7), &mut store, "d5", 6, &[5], BlockKind::MultiRes, 12, OPTS)
            .unwrap();
        assert_eq!(d.fused_channels, 17);
        let mut tape = Tape::new();
        let mut ctx = Context::new(&mut tape, &store, Mode::Train, BnConfig::default(), 0);
        let deeper = ctx.tape.constant(Tensor::ones([1, 6, 2, 2]));
        let skip = ctx.tape.constant(Tensor::full([1, 5, 4, 4], 3.0));
        let y = d.forward(&mut ctx, deeper, Some(skip), None).unwrap();
        assert_eq!(ctx.tape.shape(y).dims(), &[1, 19, 4, 4]);
        // first concat recorded after the skip is the fusion
        let bad = ctx.tape.constant(Tensor::ones([1, 5, 2, 2]));
        let err = d.forward(&mut ctx, deeper, Some(bad), None).unwrap_err().to_string();
        assert!(err.contains("encoder skip"), "{err}");
    }

    #[test]
    fn decoder_zero_weights_output_zero() {
        let mut store = ParamStore::<f32>::new();
        let d = DecoderBlockParams::new(&mut Initializer::new(8), &mut store, "d1", 3, &[2], BlockKind::Co, 2, OPTS)
            .unwrap();
        zero_weights(&mut store);
        let mut tape = Tape::new();
        let mut ctx = Context::new(&mut tape, &store, Mode::Train, BnConfig::default(), 0);
        let deeper = ctx.tape.constant(Tensor::ones([1, 3, 2, 2]));
        let skip = ctx.tape.constant(Tensor::ones([1, 2, 4, 4]));
        let y = d.forward(&mut ctx, deeper, Some(skip), None).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
