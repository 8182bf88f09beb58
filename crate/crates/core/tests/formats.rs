mod common;

use common::{fuzz_input, parse_everything};
use mem_core::event_io::{parse_csv, parse_evt, write_csv, write_evt, Event, EventStream, Polarity, EVT_HEADER_LEN};
use mem_core::rng_from_seed;
use mem_core::tensor::{ParamStore, Tensor};
use proptest::prelude::*;

fn arb_stream() -> impl Strategy<Value = EventStream> {
    (1u16..200, 1u16..200, 0usize..300).prop_flat_map(|(w, h, n)| {
        proptest::collection::vec((0u64..1_000, 0..w, 0..h, any::<bool>()), n).prop_map(move |raw| {
            let mut t = 0u64;
            let events = raw
                .into_iter()
                .map(|(dt, x, y, on)| {
                    t += dt;
                    Event::new(t, x, y, if on { Polarity::On } else { Polarity::Off })
                })
                .collect();
            EventStream::new(w, h, events).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn evt_roundtrip(s in arb_stream()) {
        let bytes = write_evt(&s);
        prop_assert_eq!(bytes.len(), EVT_HEADER_LEN + 13 * s.len());
        let back = parse_evt(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(write_evt(&back), bytes);
    }

    #[test]
    fn csv_roundtrip(s in arb_stream()) {
        prop_assert_eq!(parse_csv(&write_csv(&s)).unwrap(), s);
    }

    #[test]
    fn truncation_is_an_error(s in arb_stream(), cut in 1usize..13) {
        prop_assume!(!s.is_empty());
        let bytes = write_evt(&s);
        prop_assert!(parse_evt(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 0..6), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        for (i, shape) in shapes.iter().enumerate() {
            store.add(format!("p{i}.w"), Tensor::randn(shape, 1.0, &mut rng));
        }
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.names(), store.names());
        for (a, b) in back.values().iter().zip(store.values()) {
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn parsers_never_panic_on_garbage() {
    let mut rng = rng_from_seed(7);
    for _ in 0..20_000 {
        parse_everything(&fuzz_input(&mut rng));
    }
}

#[test]
fn checkpoint_rejects_garbage_tail() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::from_vec(vec![1.0, 2.0]));
    let mut bytes = store.to_bytes();
    bytes.push(0xff);
    assert!(ParamStore::from_bytes(&bytes).is_err());
}
