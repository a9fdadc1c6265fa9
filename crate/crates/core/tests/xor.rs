use predprop::data::gen_xor;
use predprop::train::Mode;
use predprop::{build_network, evaluate, train, Activation, ActivityInit, NetworkSpec, Orientation, TrainingConfig};

#[test]
fn xor_is_learned_at_the_documented_rates() {
    let xor = gen_xor(4, 0.0, 1).unwrap();
    let spec = NetworkSpec::layered(&[2, 8, 2], Activation::Relu, Activation::Linear)
        .with_orientation(Orientation::Discriminative)
        .with_bias(true)
        .with_seed(1);
    let config = TrainingConfig {
        alpha_m: 0.2,
        alpha_t: 0.01,
        u_m: 20,
        batch_size: 4,
        epochs: 2000,
        mode: Mode::Supervised,
        update_precision: false,
        activity_init: ActivityInit::Feedforward,
        seed: 1,
        ..TrainingConfig::default()
    };
    let mut net = build_network(spec).unwrap();
    let report = train(&mut net, &xor, &config).unwrap();
    assert_eq!(report.epochs.last().unwrap().accuracy, Some(1.0));
    assert_eq!(evaluate(&net, &xor, &config).unwrap().accuracy, Some(1.0));
}
