mod common;

use common::*;

fn check_primitive(name: &str) {
    for s in SEEDS {
        let e = primitive_error(name, s).unwrap();
        assert!(e < GRAD_TOL, "{name} seed {s}: relative error {e:e}");
    }
}

macro_rules! primitive_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                check_primitive(stringify!($name));
            }
        )*
    };
}

primitive_tests!(
    add, sub, mul, scale, add_scalar, neg, exp, softplus, sigmoid, silu, tanh, gelu, matmul_batched,
    matmul_shared, softmax, layer_norm, causal_depthwise_conv1d, conv1d, reshape, flatten_from, permute,
    transpose, concat, slice, masked_fill, sum, mean, mse, selective_scan, banded_attention, unfold,
);

#[test]
fn every_primitive_has_a_test() {
    assert_eq!(PRIMITIVES.len(), 31);
}

#[test]
fn mamba_block() {
    for s in SEEDS {
        let e = mamba_block_error(s).unwrap();
        assert!(e < GRAD_TOL, "seed {s}: {e:e}");
    }
}

#[test]
fn lwt_layer() {
    for s in SEEDS {
        let e = lwt_layer_error(s).unwrap();
        assert!(e < GRAD_TOL, "seed {s}: {e:e}");
    }
}

#[test]
fn sst_end_to_end() {
    for s in SEEDS {
        let e = sst_toy_error(s).unwrap();
        assert!(e < GRAD_TOL, "seed {s}: {e:e}");
    }
}
