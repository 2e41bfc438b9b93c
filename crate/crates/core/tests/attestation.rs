mod common;

use cloakrule::attestation::{
    build_info, generate_quote, provision_keys, HandshakeMessage, Measurement, PlatformKey,
};
use cloakrule::Error;
use common::faults::{faulty_quotes, honest_handshake_agrees, secrets};

#[test]
fn a_thousand_faulty_quotes_provision_nothing() {
    let r = faulty_quotes(1000, 1000);
    assert_eq!(r.rejected_with_attestation_error, 1000);
    assert_eq!(r.provisioned, 0);
    assert_eq!(r.replies, 0);
}

#[test]
fn honest_handshake_agrees_on_keys() {
    assert!(honest_handshake_agrees());
}

#[test]
fn key_material_does_not_travel_in_clear() {
    let platform = PlatformKey::from_seed([5; 32]);
    let s = secrets();
    let (quote, hs) = generate_quote(&platform, &build_info());
    let (hello, prov) =
        provision_keys(&quote, &Measurement::current(), &platform.verification_key(), &s).unwrap();
    let (HandshakeMessage::ServerHello { server_public, .. }, HandshakeMessage::Provision { envelope, .. }) =
        (hello, prov)
    else {
        panic!("unexpected message kinds");
    };
    // key material never travels in clear
    let wire = envelope.to_json();
    for k in s.device_keys.values() {
        assert!(!wire.contains(&hex::encode(k.secret_bytes())));
    }
    let (keys, ruleset) = hs.finish(&server_public, &envelope).unwrap();
    assert_eq!(keys.device_keys, s.device_keys);
    assert_eq!(ruleset, s.ruleset_key);
    assert_eq!(keys.k_sgx, platform.sealing_key(&Measurement::current()));
}

#[test]
fn provisioning_is_bound_to_the_quoting_enclave() {
    let platform = PlatformKey::from_seed([5; 32]);
    let (quote, _victim) = generate_quote(&platform, &build_info());
    let (_other_quote, eavesdropper) = generate_quote(&platform, &build_info());
    let (hello, prov) =
        provision_keys(&quote, &Measurement::current(), &platform.verification_key(), &secrets())
            .unwrap();
    let (HandshakeMessage::ServerHello { server_public, .. }, HandshakeMessage::Provision { envelope, .. }) =
        (hello, prov)
    else {
        panic!()
    };
    assert!(matches!(
        eavesdropper.finish(&server_public, &envelope),
        Err(Error::Authentication)
    ));
}

#[test]
fn sealing_key_depends_on_measurement_and_platform() {
    let a = PlatformKey::from_seed([1; 32]);
    let b = PlatformKey::from_seed([2; 32]);
    let m = Measurement::current();
    let other = Measurement::of(b"something else");
    assert_eq!(a.sealing_key(&m), PlatformKey::from_seed([1; 32]).sealing_key(&m));
    assert_ne!(a.sealing_key(&m), a.sealing_key(&other));
    assert_ne!(a.sealing_key(&m), b.sealing_key(&m));
}
