mod common;

fn pass(check: common::Check) {
    match check {
        Ok(detail) => eprintln!("{detail}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn mlp_head_with_leaky_rectifier() {
    pass(common::gradcheck_mlp_head());
}

#[test]
fn encoder_block() {
    pass(common::gradcheck_encoder_block());
}

#[test]
fn regression_loss_and_detached_target() {
    pass(common::gradcheck_regression_loss());
}
