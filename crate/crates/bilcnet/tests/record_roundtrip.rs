//! Property tests for the record wire format: serialize/parse must be lossless
//! and parsing must canonicalize.

use bilcnet::record::{
    parse_record, serialize_record, ChannelKind, PhysicalChannelRecord,
};
use proptest::prelude::*;

fn arb_channel() -> impl Strategy<Value = ChannelKind> {
    prop_oneof![
        Just(ChannelKind::Pdcch),
        Just(ChannelKind::Pdsch),
        Just(ChannelKind::Pucch),
        Just(ChannelKind::Pusch),
        Just(ChannelKind::Pbch),
        Just(ChannelKind::Prach),
    ]
}

prop_compose! {
    fn arb_record()(
        chan in arb_channel(),
        frame in 0u64..100_000,
        subframe in 0u8..=9,
        slot in 0u8..=1,
        mcs in proptest::option::of(0u8..=28),
        mod_order in proptest::option::of(prop_oneof![Just(2u8), Just(4), Just(6), Just(8)]),
        harq_id in proptest::option::of(0u8..=15),
        crc_ok in proptest::option::of(any::<bool>()),
        tb_len in proptest::option::of(0u64..10_000_000),
        prb in proptest::option::of(0u32..=273),
        symb_start in proptest::option::of(0u8..=13),
        symb_len in proptest::option::of(1u8..=14),
        snr in proptest::option::of(-30.0f64..60.0),
        epre in proptest::option::of(-140.0f64..-40.0),
        cce_index in proptest::option::of(0u32..100),
        aggregation_level in proptest::option::of(prop_oneof![
            Just(1u8), Just(2), Just(4), Just(8), Just(16)
        ]),
        pucch_format in proptest::option::of(0u8..=4),
    ) -> PhysicalChannelRecord {
        PhysicalChannelRecord {
            frame,
            subframe,
            slot,
            chan,
            dir: chan.direction(),
            mcs,
            mod_order,
            harq_id,
            crc_ok,
            tb_len,
            prb,
            symb_start,
            symb_len,
            snr,
            epre,
            cce_index,
            aggregation_level,
            pucch_format,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn serialize_then_parse_is_identity(rec in arb_record()) {
        let line = serialize_record(&rec);
        let back = parse_record(&line).unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn parse_canonicalizes(rec in arb_record()) {
        let once = serialize_record(&rec);
        let twice = serialize_record(&parse_record(&once).unwrap());
        prop_assert_eq!(once, twice);
    }
}
