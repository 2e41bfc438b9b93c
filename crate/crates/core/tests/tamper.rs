mod common;

use cloakrule::envelope::SymmetricKey;
use common::faults::*;

#[test]
fn every_bit_flip_of_an_event_envelope_is_rejected() {
    let b = boundary();
    // the untouched envelope does fire
    assert_eq!(b.handle_event("evt/p", &event_envelope()).unwrap().len(), 1);
    let r = flip_event_envelope();
    assert_eq!(r.mutations, event_envelope().len() * 8);
    assert!(r.escapes.is_empty(), "{:?}", r.escapes);
    assert_eq!(r.rejected, r.mutations);
    assert_eq!(r.side_effects, 0);
}

#[test]
fn every_bit_flip_of_a_command_envelope_is_rejected() {
    let r = flip_command_envelope();
    assert!(r.escapes.is_empty(), "{:?}", r.escapes);
    assert_eq!(r.rejected, command_envelope().len() * 8);
    assert_eq!(r.side_effects, 0);
}

#[test]
fn genuine_command_still_applies() {
    let hub = cloakrule::hub::Hub::new(cloakrule::enclave::Mode::Full, keys());
    let s = cloakrule::rule::DeviceId::new("s").unwrap();
    hub.add_actuator(s.clone(), cloakrule::device::DeviceKind::Switch);
    hub.deliver("cmd/s", &command_envelope()).unwrap();
    assert_eq!(hub.actuator(&s).unwrap().get("switch"), Some(&"on".into()));
}

#[test]
fn sealed_records_detect_tampering() {
    let b = boundary();
    let rec = b.sealed_records().pop().unwrap();
    let k_other = SymmetricKey::new("k_sgx", [0; 32]);
    assert!(cloakrule::envelope::unseal_rules(&k_other, &rec).is_err());
    let bytes = serde_json::to_vec(&rec).unwrap();
    let key = SymmetricKey::new("k_sgx", [9; 32]);
    for (_, _, m) in bit_flips(&bytes).step_by(7) {
        if let Ok(r) = serde_json::from_slice::<cloakrule::envelope::SealedRecord>(&m) {
            assert!(cloakrule::envelope::unseal_rules(&key, &r).is_err());
        }
    }
}
