mod common;

use ppdst_core::cl::KeyLoss;

#[test]
fn full_loss_gradients_match_central_differences() {
    let setup = common::toy_setup();
    let data = common::toy_data(&setup);
    for (key_loss, current) in [(KeyLoss::Plain, true), (KeyLoss::Bce, true), (KeyLoss::Bce, false)] {
        let (worst, n) = common::gradient_check(&setup, &data, key_loss, current, 0.3, 1e-5);
        assert_eq!(n, 2 * 2 * common::TOY_DIM + 2 * common::TOY_KEY_DIM);
        assert!(worst < 1e-4, "{key_loss:?} current={current}: relative error {worst:e}");
    }
}
