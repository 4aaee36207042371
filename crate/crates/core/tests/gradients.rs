mod common;

use common::Report;

const SEED: u64 = 0x5EED_0007;

fn assert_report(r: Report) {
    println!("{}", r.summary());
    assert!(r.parameter_probes() >= common::PROBES, "{}", r.summary());
    assert!(r.max_rel_err() < common::TOLERANCE, "{}", r.summary());
}

#[test]
fn source_encoder() {
    assert_report(common::source_encoder(SEED));
}

#[test]
fn res_block() {
    assert_report(common::res_block(SEED));
}

#[test]
fn snr_adaptive() {
    assert_report(common::snr_adaptive(SEED));
}

#[test]
fn channel_encoder() {
    assert_report(common::channel_encoder(SEED));
}

#[test]
fn channel_decoder() {
    assert_report(common::channel_decoder(SEED));
}

#[test]
fn source_decoder() {
    assert_report(common::source_decoder(SEED));
}

#[test]
fn policy_network() {
    assert_report(common::policy_forward(SEED));
}

#[test]
fn straight_through_estimator() {
    assert_report(common::straight_through(SEED, 100));
}

#[test]
fn mask_and_power_normalization() {
    assert_report(common::mask_and_normalize(SEED));
}

#[test]
fn end_to_end_fixed_rate() {
    assert_report(common::end_to_end_fixed_rate(SEED));
}
