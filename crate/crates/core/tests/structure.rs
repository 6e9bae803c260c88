//! Shape, wiring and determinism properties of the engine, the blocks and
//! the assembled network.

use cresunet::blocks::{Block, BlockKind, BlockOptions, DecoderBlockParams, StageOrder};
use cresunet::checkpoint::{load_model, save_model};
use cresunet::model::{Model, ModelSpec, LEVELS};
use cresunet::nn::{BnConfig, Context, Initializer, ParamStore};
use cresunet::{Mode, Padding, Tape, Tensor, Tensor32};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPTS: BlockOptions = BlockOptions { alpha: 1.67, order: StageOrder::ActThenNorm };

fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn channel_slice(t: &Tensor32, from: usize, to: usize) -> Vec<f32> {
    let [n, c, h, w] = <[usize; 4]>::try_from(t.dims()).unwrap();
    let mut out = Vec::new();
    for s in 0..n {
        out.extend_from_slice(&t.data()[(s * c + from) * h * w..(s * c + to) * h * w]);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn same_padding_preserves_spatial_size(
        n in 1usize..=2, cin in 1usize..=3, cout in 1usize..=3,
        h in 1usize..=9, w in 1usize..=9, half in 0usize..=3, seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let mut t = Tape::<f32>::new();
        let x = t.constant(random_tensor([n, cin, h, w], seed));
        let wt = t.constant(random_tensor([cout, cin, k, k], seed ^ 1));
        let y = t.conv2d(x, wt, None, 1, Padding::Same).unwrap();
        prop_assert_eq!(t.shape(y).dims(), &[n, cout, h, w]);
    }

    #[test]
    fn concat_then_slice_is_identity(
        n in 1usize..=3, ca in 1usize..=4, cb in 1usize..=4, h in 1usize..=5, w in 1usize..=5, seed in any::<u64>(),
    ) {
        let a = random_tensor([n, ca, h, w], seed);
        let b = random_tensor([n, cb, h, w], seed.wrapping_add(1));
        let mut t = Tape::<f32>::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.concat_channels(&[va, vb]).unwrap();
        let cat = t.value(y).clone();
        prop_assert_eq!(channel_slice(&cat, 0, ca), a.data().to_vec());
        prop_assert_eq!(channel_slice(&cat, ca, ca + cb), b.data().to_vec());
    }

    #[test]
    fn upsample_then_maxpool_is_identity(
        n in 1usize..=2, c in 1usize..=3, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>(),
    ) {
        let x = random_tensor([n, c, h, w], seed);
        let mut t = Tape::<f32>::new();
        let v = t.constant(x.clone());
        let up = t.upsample2x(v).unwrap();
        let back = t.maxpool2d(up).unwrap();
        prop_assert_eq!(t.value(back), &x);
    }

    #[test]
    fn blocks_preserve_spatial_size(
        kind in prop::sample::select(vec![BlockKind::Co, BlockKind::Identity, BlockKind::MultiRes]),
        cin in 1usize..=4, filters in 4usize..=8, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>(),
    ) {
        let mut store = ParamStore::<f32>::new();
        let b = Block::new(kind, &mut Initializer::new(seed), &mut store, "b", cin, filters, OPTS).unwrap();
        prop_assert_eq!(store.trainable_count(), Block::param_count_formula(kind, cin, filters, OPTS.alpha));
        let mut tape = Tape::new();
        let mut ctx = Context::new(&mut tape, &store, Mode::Train, BnConfig::default(), seed);
        let x = ctx.tape.constant(random_tensor([2, cin, h, w], seed));
        let y = b.forward(&mut ctx, x).unwrap();
        prop_assert_eq!(ctx.tape.shape(y).dims(), &[2, b.out_channels(), h, w]);
        prop_assert_eq!(b.out_channels(), Block::out_channels_formula(kind, filters, OPTS.alpha));
    }

    #[test]
    fn decoder_doubles_spatial_size(
        kind in prop::sample::select(vec![BlockKind::Co, BlockKind::Identity, BlockKind::MultiRes]),
        deeper in 1usize..=4, filters in 4usize..=6, enc in prop::option::of(1usize..=3),
        pooled in prop::option::of(1usize..=3), h in 1usize..=4, seed in any::<u64>(),
    ) {
        let skips: Vec<usize> = enc.into_iter().chain(pooled).collect();
        let mut store = ParamStore::<f32>::new();
        let d = DecoderBlockParams::new(&mut Initializer::new(seed), &mut store, "d", deeper, &skips, kind, filters, OPTS).unwrap();
        prop_assert_eq!(
            store.trainable_count(),
            DecoderBlockParams::param_count_formula(deeper, &skips, kind, filters, OPTS.alpha)
        );
        let mut tape = Tape::new();
        let mut ctx = Context::new(&mut tape, &store, Mode::Train, BnConfig::default(), seed);
        let x = ctx.tape.constant(random_tensor([1, deeper, h, h], seed));
        let e = enc.map(|c| ctx.tape.constant(random_tensor([1, c, 2 * h, 2 * h], seed ^ 2)));
        let p = pooled.map(|c| ctx.tape.constant(random_tensor([1, c, 2 * h, 2 * h], seed ^ 3)));
        let y = d.forward(&mut ctx, x, e, p).unwrap();
        prop_assert_eq!(ctx.tape.shape(y).dims(), &[1, d.out_channels(), 2 * h, 2 * h]);
    }
}

#[test]
fn co_block_emits_seven_f_channels_at_every_level_width() {
    for f in [16, 32, 64, 128, 256] {
        let mut store = ParamStore::<f32>::new();
        let b = Block::new(BlockKind::Co, &mut Initializer::new(1), &mut store, "co", 3, f, OPTS).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Context::new(&mut tape, &store, Mode::Eval, BnConfig::default(), 0);
        let x = ctx.tape.constant(random_tensor([1, 3, 4, 4], 9));
        let y = b.forward(&mut ctx, x).unwrap();
        ctx.record("co", y);
        assert_eq!(ctx.trace()[0].shape.dims(), &[1, 7 * f, 4, 4]);
    }
}

#[test]
fn default_network_size() {
    let spec = ModelSpec::default();
    let m = Model::<f32>::build(spec.clone()).unwrap();
    assert_eq!(m.param_count(), 9_425_292);
    assert_eq!(m.param_count(), spec.param_count_formula());
}

#[test]
fn output_matches_input_for_sizes_divisible_by_32() {
    for size in [32, 64, 96, 128, 256] {
        let m = Model::<f32>::build(ModelSpec::default().with_input_size(size, size)).unwrap();
        let out = m.infer(&random_tensor([1, 1, size, size], size as u64).map(|v| v.abs())).unwrap();
        assert_eq!(out.output.dims(), &[1, 1, size, size], "size {size}");
        assert!(out.output.data().iter().all(|p| (0.0..=1.0).contains(p)));
        let find = |l: &str| out.trace.iter().find(|t| t.label == l).unwrap().shape.dims().to_vec();
        for i in 1..=LEVELS {
            assert_eq!(find(&format!("E{i}"))[2..], [size >> (i - 1); 2], "E{i} at {size}");
            assert_eq!(find(&format!("ME{i}"))[2..], [size >> i; 2], "ME{i} at {size}");
            assert_eq!(find(&format!("D{i}"))[2..], [size >> (i - 1); 2], "D{i} at {size}");
        }
        assert_eq!(find("E6")[2..], [size / 32; 2]);
    }
    for size in [0, 48, 100] {
        assert!(Model::<f32>::build(ModelSpec::default().with_input_size(size, size)).is_err(), "size {size}");
    }
}

#[test]
fn rectangular_inputs_are_supported() {
    let m = Model::<f32>::build(ModelSpec::default().with_input_size(32, 64)).unwrap();
    let out = m.predict(&random_tensor([1, 1, 32, 64], 4)).unwrap();
    assert_eq!(out.dims(), &[1, 1, 32, 64]);
}

#[test]
fn eval_forward_is_deterministic_and_ignores_dropout_seed() {
    let m = Model::<f32>::build(ModelSpec::default().with_input_size(32, 32)).unwrap();
    let x = random_tensor([2, 1, 32, 32], 1);
    let run = |seed: u64| {
        let mut tape = Tape::new();
        let mut ctx = m.context(&mut tape, Mode::Eval, seed);
        let xv = ctx.tape.constant(x.clone());
        let y = m.forward(&mut ctx, xv).unwrap();
        drop(ctx);
        tape.value(y).clone()
    };
    let a = run(0);
    assert_eq!(a, run(0));
    assert_eq!(a, run(12345));
}

#[test]
fn train_forward_is_deterministic_given_seed() {
    let m = Model::<f32>::build(ModelSpec::default().with_input_size(32, 32)).unwrap();
    let x = random_tensor([2, 1, 32, 32], 2);
    let run = |seed: u64| {
        let mut tape = Tape::new();
        let mut ctx = m.context(&mut tape, Mode::Train, seed);
        let xv = ctx.tape.constant(x.clone());
        let y = m.forward(&mut ctx, xv).unwrap();
        drop(ctx);
        tape.value(y).clone()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn eval_samples_are_independent() {
    let m = Model::<f32>::build(ModelSpec::default().with_input_size(32, 32)).unwrap();
    let a = random_tensor([1, 1, 32, 32], 10);
    let b = random_tensor([1, 1, 32, 32], 11);
    let joint = m.predict(&Tensor::stack(&[a.clone(), b.clone()]).unwrap()).unwrap();
    for (i, single) in [a, b].iter().enumerate() {
        let alone = m.predict(single).unwrap();
        let part = joint.sample(i).unwrap();
        let diff = alone.data().iter().zip(part.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-5, "sample {i} differs by {diff}");
    }
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let m = Model::<f32>::build(ModelSpec::default().with_input_size(32, 32)).unwrap();
    let x = random_tensor([2, 1, 32, 32], 3).map(|v| v.abs());
    let target = Tensor::from_vec([2, 1, 32, 32], (0..2048).map(|i| ((i / 32) % 32 > 12 && i % 32 > 10) as u8 as f32).collect()).unwrap();
    let mut tape = Tape::new();
    let mut ctx = m.context(&mut tape, Mode::Train, 5);
    let xv = ctx.tape.constant(x);
    let y = m.forward(&mut ctx, xv).unwrap();
    let loss = ctx.tape.dice_loss(y, &target, 1.0).unwrap();
    let grads = ctx.tape.backward(loss).unwrap();
    let dead = ctx.unreached_params(&grads);
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.crun");
    let mut spec = ModelSpec::default().with_input_size(32, 32);
    spec.seed = 77;
    let m = Model::<f32>::build(spec).unwrap();
    save_model(&m, 77, 3, &path).unwrap();
    let (back, meta) = load_model::<f32>(&path).unwrap();
    assert_eq!(meta.epoch, 3);
    let x = random_tensor([1, 1, 32, 32], 6);
    assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    let first = std::fs::read(&path).unwrap();
    save_model(&back, 77, 3, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}
