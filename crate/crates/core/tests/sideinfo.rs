mod common;

use proptest::prelude::*;
use ubgan::pqmf::SubbandSignal;
use ubgan::sideinfo::{encode, pack, rolling_window, unpack, SideInfoEncoder, CURRENT, HISTORY, LOOKAHEAD, WINDOW_LEN};
use ubgan::{AudioBuffer, Error, ErrorClass, Generator, GeneratorConfig, Mode};

use common::{active_model, rng, uniform};

#[test]
fn header_layout() {
    let b = pack(&[1, 2, 3]).unwrap();
    assert_eq!(&b[..4], b"UBS1");
    assert_eq!(&b[4..6], &1u16.to_le_bytes());
    assert_eq!(&b[6..8], &20u16.to_le_bytes());
    assert_eq!(&b[8..12], &3u32.to_le_bytes());
    assert_eq!(&b[12..], &[0x12, 0x30]);
    assert_eq!(WINDOW_LEN, 480);
}

#[test]
fn malformed_streams() {
    let good = pack(&[5; 4]).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(unpack(&bad), Err(Error::BadMagic { .. })));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(unpack(&bad), Err(Error::UnsupportedVersion(9))));
    assert!(matches!(unpack(&good[..good.len() - 1]), Err(Error::LengthMismatch { .. })));
    assert!(matches!(unpack(&good[..5]), Err(Error::TruncatedFile(_))));
    let mut odd = pack(&[5; 3]).unwrap();
    *odd.last_mut().unwrap() |= 1;
    assert_eq!(unpack(&odd).unwrap_err().class(), ErrorClass::Format);
    assert!(matches!(pack(&[16]), Err(Error::CodeOutOfRange(16))));
}

#[test]
fn blind_models_cannot_encode() {
    let m = Generator::init(GeneratorConfig::blind(), 1).unwrap();
    assert!(encode(&AudioBuffer::zeros(640, 32000).unwrap(), &m).is_err());
    assert!(SideInfoEncoder::new(&m).is_err());
}

#[test]
fn silence_gives_a_constant_code() {
    let m = active_model(Mode::Guided, 2);
    let codes = encode(&AudioBuffer::zeros(640 * 12, 32000).unwrap(), &m).unwrap();
    assert_eq!(codes.len(), 12);
    assert!(codes.iter().all(|&c| c == codes[0]), "{codes:?}");
}

#[test]
fn wrong_rate_and_alignment() {
    let m = Generator::init(GeneratorConfig::guided(), 1).unwrap();
    assert_eq!(encode(&AudioBuffer::zeros(640, 16000).unwrap(), &m).unwrap_err().class(), ErrorClass::Consistency);
    assert!(matches!(encode(&AudioBuffer::zeros(700, 32000).unwrap(), &m), Err(Error::FrameAlignment { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_round_trips(codes in prop::collection::vec(0u8..16, 0..300)) {
        let b = pack(&codes).unwrap();
        prop_assert_eq!(b.len(), 12 + codes.len().div_ceil(2));
        prop_assert_eq!(unpack(&b).unwrap(), codes);
    }

    #[test]
    fn bitrate_is_200_bits_per_second(pairs in 1usize..2500) {
        // Payload bits over duration (frames / 50 s), with an even frame count.
        let frames = 2 * pairs;
        let payload_bits = 8 * (pack(&vec![7; frames]).unwrap().len() - 12);
        prop_assert_eq!(payload_bits * 50, 200 * frames);
    }

    #[test]
    fn unpack_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = unpack(&bytes);
        let mut with_magic = b"UBS1".to_vec();
        with_magic.extend_from_slice(&bytes);
        if let Ok(codes) = unpack(&with_magic) {
            prop_assert!(codes.iter().all(|&c| c < 16));
        }
    }

    #[test]
    fn rolling_window_layout(len in 1usize..400, frame in 0usize..6, seed in any::<u64>()) {
        let data = uniform(&mut rng(seed), 8 * len, 1.0);
        let rows: Vec<&[f32]> = data.chunks(len).collect();
        let sb = SubbandSignal::from_rows(&rows).unwrap();
        let w = rolling_window(&sb, frame).unwrap();
        prop_assert_eq!(w.len(), WINDOW_LEN);
        let span = HISTORY + CURRENT + LOOKAHEAD;
        for b in 0..4 {
            for j in 0..span {
                let idx = (frame * CURRENT + j) as isize - HISTORY as isize;
                let want = if idx < 0 || idx as usize >= len { 0.0 } else { sb.band(4 + b)[idx as usize] };
                prop_assert_eq!(w[b * span + j], want);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn streaming_encoder_equals_batch(seed in any::<u64>(), frames in 1usize..10, chunk in 1usize..1500) {
        let m = active_model(Mode::Guided, 3);
        let x = uniform(&mut rng(seed), 640 * frames, 0.5);
        let batch = encode(&AudioBuffer::new(x.clone(), 32000).unwrap(), &m).unwrap();
        let mut enc = SideInfoEncoder::new(&m).unwrap();
        let mut got = Vec::new();
        for c in x.chunks(chunk) {
            got.extend(enc.push(c).unwrap());
        }
        got.extend(enc.finish().unwrap());
        prop_assert_eq!(got, batch);
    }

    #[test]
    fn encoder_ignores_input_past_its_look_ahead(seed in any::<u64>(), frame in 0usize..6) {
        let m = active_model(Mode::Guided, 3);
        let x = uniform(&mut rng(seed), 640 * 8, 0.5);
        let horizon = 640 * (frame + 1) + 160;
        let mut enc = SideInfoEncoder::new(&m).unwrap();
        let early = enc.push(&x[..horizon]).unwrap();
        prop_assert_eq!(early.len(), frame + 1);
        let mut y = x.clone();
        for v in &mut y[horizon..] {
            *v = -*v + 0.3;
        }
        let a = encode(&AudioBuffer::new(x, 32000).unwrap(), &m).unwrap();
        let b = encode(&AudioBuffer::new(y, 32000).unwrap(), &m).unwrap();
        prop_assert_eq!(&a[..=frame], &b[..=frame]);
        prop_assert_eq!(&a[..=frame], &early[..]);
    }
}
