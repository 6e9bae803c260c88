//! Randomized gradient checks of every primitive and block.

use cresunet::checks::{self, CaseShape, BLOCK_TOLERANCE, NETWORK_TOLERANCE, OP_TOLERANCE};
use cresunet::OpKind;
use proptest::prelude::*;

fn case_shape() -> impl Strategy<Value = CaseShape> {
    (1usize..=2, 1usize..=3, 2usize..=6, 2usize..=6, 1usize..=3, prop::sample::select(vec![1usize, 3, 5]), any::<bool>(), 1usize..=2, 0usize..=3)
        .prop_map(|(n, c, h, w, c2, kernel, same, stride, pad)| CaseShape {
            n,
            c,
            h,
            w,
            c2,
            kernel,
            stride: if same { 1 } else { stride },
            pad: if same { None } else { Some(pad.min(kernel / 2 + 1)) },
        })
}

macro_rules! op_property {
    ($($test:ident => $op:literal),* $(,)?) => {$(
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]
            #[test]
            fn $test(shape in case_shape(), seed in any::<u64>()) {
                let r = checks::check_op_case($op, &shape, seed, None).unwrap();
                prop_assert!(
                    r.wide.passes(OP_TOLERANCE),
                    "{} {:?}: max rel err {:.3e}",
                    $op,
                    shape,
                    r.wide.max_rel_err()
                );
            }
        }
    )*};
}

op_property! {
    conv2d_gradient => "conv2d",
    maxpool2d_gradient => "maxpool2d",
    upsample2x_gradient => "upsample2x",
    batchnorm_train_gradient => "batchnorm_train",
    batchnorm_eval_gradient => "batchnorm_eval",
    relu_gradient => "relu",
    sigmoid_gradient => "sigmoid",
    concat_gradient => "concat",
    add_gradient => "add",
    mul_gradient => "mul",
    dropout_gradient => "dropout",
    sum_gradient => "sum",
    dice_loss_gradient => "dice_loss",
}

#[test]
fn every_listed_op_has_a_property() {
    assert_eq!(checks::OPS.len(), 13);
}

#[test]
fn blocks_pass_in_train_mode() {
    for name in checks::BLOCKS {
        let o = checks::check_block(name, 4, 11, None).unwrap();
        assert!(o.passed(), "{}", o.line());
        assert!(o.max_rel_err <= BLOCK_TOLERANCE);
    }
}

#[test]
fn network_checks_pass() {
    for name in checks::NETWORK {
        let o = checks::check_network(name, 30, 5, None).unwrap();
        assert!(o.passed(), "{}", o.line());
        assert!(o.max_rel_err <= NETWORK_TOLERANCE);
    }
}

#[test]
fn injected_faults_are_detected() {
    for (op, kind) in [
        ("conv2d", OpKind::Conv2d),
        ("batchnorm_train", OpKind::BatchNorm),
        ("upsample2x", OpKind::Upsample2x),
        ("dice_loss", OpKind::DiceLoss),
    ] {
        let o = checks::check_op(op, 3, 2, Some(kind)).unwrap();
        assert!(!o.passed(), "fault in {op} went unnoticed: {}", o.line());
    }
    let o = checks::check_block("block_co", 1, 2, Some(OpKind::Conv2d)).unwrap();
    assert!(!o.passed(), "{}", o.line());
}
