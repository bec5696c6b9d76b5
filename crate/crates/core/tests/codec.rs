mod common;

use blindfl::fhe::codec::{deserialize_public_key, deserialize_secret_key, serialize_public_key, serialize_secret_key};
use blindfl::fhe::{Backend, RoundId, SchemeTag};
use blindfl::runtime::wire::{decode_message_prefix, encode_message, MessageKind, WireError, WireMessage, DEFAULT_FRAME_CAP};
use proptest::prelude::*;

use common::{fuzz_ciphertexts, fuzz_params, fuzz_wire, rng};

#[test]
fn wire_fuzz_is_clean() {
    let t = fuzz_wire(2000, 1);
    assert!(t.clean(), "{t:?}");
}

#[test]
fn ciphertext_fuzz_is_clean() {
    let t = fuzz_ciphertexts(400, 2);
    assert!(t.clean(), "{t:?}");
}

#[test]
fn keys_roundtrip_and_reject_damage() {
    for scheme in [SchemeTag::Ckks, SchemeTag::Oracle] {
        let backend = Backend::new(fuzz_params(scheme)).unwrap();
        let keys = backend.keygen(&mut rng(5), RoundId(4)).unwrap();
        let pk = serialize_public_key(&keys.public);
        let sk = serialize_secret_key(&keys.secret);
        assert_eq!(deserialize_public_key(&pk).unwrap(), keys.public);
        assert_eq!(deserialize_secret_key(&sk).unwrap(), keys.secret);
        for at in [0, 5, pk.len() / 2, pk.len() - 1] {
            let mut bad = pk.clone();
            bad[at] ^= 0x40;
            assert!(deserialize_public_key(&bad).is_err());
        }
        assert!(deserialize_secret_key(&sk[..sk.len() - 1]).is_err());
        assert!(deserialize_public_key(&sk).is_err());
    }
}

proptest! {
    #[test]
    fn concatenated_frames_split_cleanly(
        payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 1..6),
        round in any::<u64>(),
    ) {
        let msgs: Vec<_> = payloads
            .into_iter()
            .enumerate()
            .map(|(i, p)| WireMessage::new(MessageKind::ALL[i % 6], RoundId(round), i as u32, p))
            .collect();
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend(encode_message(m, DEFAULT_FRAME_CAP).unwrap());
        }
        let mut at = 0;
        for m in &msgs {
            let (back, used) = decode_message_prefix(&stream[at..], DEFAULT_FRAME_CAP).unwrap();
            prop_assert_eq!(&back, m);
            at += used;
        }
        prop_assert_eq!(at, stream.len());
    }

    #[test]
    fn oversized_headers_are_refused(len in 1000u64..u64::MAX) {
        let mut frame = encode_message(&WireMessage::new(MessageKind::GlobalModel, RoundId(1), 0, Vec::new()), 1024).unwrap();
        frame[17..25].copy_from_slice(&len.to_le_bytes());
        let refused = matches!(decode_message_prefix(&frame, 1024), Err(WireError::CapExceeded { .. }));
        prop_assert!(refused);
    }
}
