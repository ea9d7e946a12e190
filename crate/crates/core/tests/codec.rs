mod common;

#[test]
fn decode_inverts_encode() {
    let worst = common::codec_round_trip(10_000);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn zero_offsets_reproduce_priors() {
    assert!(common::zero_locations_decode_to_priors());
}
