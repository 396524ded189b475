mod common;

use std::io::Cursor;

use clockwork::protocol::{
    decode_message, encode_message, read_message, ActionResult, ActionStatus, DecodeError, InferenceResponse, Message,
    ResponseStatus, MAX_FRAME,
};
use clockwork::{ActionKind, Nanos, TimePoint};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_message;

/// Payload length from the documented field layout.
fn expected_payload_len(m: &Message) -> usize {
    match m {
        Message::Handshake(h) => 16 + 4 * h.models.len(),
        Message::Action(a) => match a.kind {
            ActionKind::Load => 41,
            ActionKind::Unload => 33,
            ActionKind::Infer => 49 + 8 * a.batch.len(),
        },
        Message::Result(_) => 33,
        Message::Request(r) => 40 + r.payload.len(),
        Message::Response(_) => 18,
    }
}

fn check_round_trip(m: &Message) -> Result<(), String> {
    let bytes = encode_message(m);
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len != expected_payload_len(m) || bytes.len() != 5 + len {
        return Err(format!("frame length {len} for {m:?}"));
    }
    let back = decode_message(&bytes).map_err(|e| format!("{e} for {m:?}"))?;
    if &back != m {
        return Err(format!("mismatch: {m:?} became {back:?}"));
    }
    if encode_message(&back) != bytes {
        return Err(format!("re-encoding differs for {m:?}"));
    }
    Ok(())
}

#[test]
fn hundred_thousand_seeded_messages_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let m = random_message(&mut rng);
        if let Err(e) = check_round_trip(&m) {
            mismatches += 1;
            eprintln!("{e}");
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn response_bytes_are_little_endian() {
    let m = Message::Response(InferenceResponse {
        request_id: 0x0102030405060708,
        status: ResponseStatus::Denied,
        latency: Nanos(0x1122),
        cold_start: true,
    });
    let mut want = vec![18, 0, 0, 0, 5];
    want.extend_from_slice(&[8, 7, 6, 5, 4, 3, 2, 1]);
    want.push(1);
    want.extend_from_slice(&[0x22, 0x11, 0, 0, 0, 0, 0, 0]);
    want.push(1);
    assert_eq!(encode_message(&m), want);
}

#[test]
fn stream_of_frames_reads_back_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let msgs: Vec<Message> = (0..500).map(|_| random_message(&mut rng)).collect();
    let buf: Vec<u8> = msgs.iter().flat_map(encode_message).collect();
    let mut cur = Cursor::new(buf);
    for m in &msgs {
        assert_eq!(read_message(&mut cur).unwrap().as_ref(), Some(m));
    }
    assert!(read_message(&mut cur).unwrap().is_none());
}

#[test]
fn oversized_length_is_refused_before_allocation() {
    let mut frame = ((MAX_FRAME + 1) as u32).to_le_bytes().to_vec();
    frame.push(2);
    let err = read_message(&mut Cursor::new(frame)).unwrap_err();
    assert!(err.to_string().contains("exceeds limit"));
}

#[test]
fn header_cut_mid_stream_is_an_error() {
    let m = Message::Result(ActionResult::failed(1, ActionStatus::OutOfPages, TimePoint(9)));
    let mut bytes = encode_message(&m);
    bytes.extend_from_slice(&[3, 0]);
    let mut cur = Cursor::new(bytes);
    assert!(read_message(&mut cur).unwrap().is_some());
    assert!(read_message(&mut cur).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn any_message_round_trips(seed in any::<u64>()) {
        let m = random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(check_round_trip(&m).is_ok(), "{:?}", check_round_trip(&m));
    }

    #[test]
    fn encoding_is_deterministic(seed in any::<u64>()) {
        let a = random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(encode_message(&a), encode_message(&b));
    }

    #[test]
    fn corrupted_frames_never_panic(seed in any::<u64>(), pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in 0usize..4) {
        let m = random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut bytes = encode_message(&m);
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        bytes.truncate(bytes.len() - cut.min(bytes.len()));
        // Whatever decodes must be the canonical encoding of itself.
        if let Ok(back) = decode_message(&bytes) {
            prop_assert_eq!(encode_message(&back), bytes);
        }
    }

    #[test]
    fn truncation_is_reported(seed in any::<u64>(), keep in any::<prop::sample::Index>()) {
        let m = random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_message(&m);
        let k = keep.index(bytes.len());
        let is_truncated = matches!(decode_message(&bytes[..k]), Err(DecodeError::Truncated { .. }));
        prop_assert!(is_truncated);
    }
}
