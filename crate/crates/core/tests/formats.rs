use proptest::prelude::*;
use rouser::checkpoint;
use rouser::events_io::{
    decode_neutral, encode_neutral, parse_nmnist, raster_to_events, rasterize,
};
use rouser::network::init_network;
use rouser::optim::AdamState;
use rouser::{Event, EventStream, Geometry, Hyperparams, NetworkSpec, SpikeTensor};

fn nmnist_record(e: &Event) -> [u8; 5] {
    let ts = e.timestamp;
    [
        e.x as u8,
        e.y as u8,
        (e.polarity << 7) | ((ts >> 16) as u8 & 0x7f),
        (ts >> 8) as u8,
        ts as u8,
    ]
}

fn arb_events() -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec(
        (0u16..34, 0u16..34, 0u8..2, 0u32..(1 << 23)).prop_map(|(x, y, polarity, timestamp)| {
            Event {
                x,
                y,
                polarity,
                timestamp,
            }
        }),
        0..200,
    )
}

proptest! {
    #[test]
    fn nmnist_records_survive_neutral_round_trip(events in arb_events(), label in 0u32..10) {
        let bytes: Vec<u8> = events.iter().flat_map(nmnist_record).collect();
        let parsed = parse_nmnist(&bytes, label).unwrap();
        prop_assert_eq!(parsed.events.len(), events.len());
        prop_assert!(parsed.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let decoded = decode_neutral(&encode_neutral(&parsed)).unwrap();
        prop_assert_eq!(&decoded, &parsed);
        prop_assert_eq!(rasterize(&decoded, 50, 1000), rasterize(&parsed, 50, 1000));
    }

    #[test]
    fn raster_never_exceeds_event_count(events in arb_events(), steps in 1usize..400, bin in 1u64..5000) {
        let bytes: Vec<u8> = events.iter().flat_map(nmnist_record).collect();
        let stream = parse_nmnist(&bytes, 0).unwrap();
        let raster = rasterize(&stream, steps, bin);
        prop_assert!(raster.is_binary());
        prop_assert!(raster.total() <= stream.events.len());
        prop_assert_eq!(raster.neurons(), Geometry::NMNIST.neurons());
    }

    #[test]
    fn raster_events_raster_is_identity(neurons in 1usize..30, steps in 1usize..60, bin in 1u32..2000, seed in any::<u64>()) {
        let mut state = seed | 1;
        let raster = SpikeTensor::from_fn(neurons, steps, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state % 5 == 0
        });
        let stream = raster_to_events(&raster, bin, 4).unwrap();
        prop_assert_eq!(stream.events.len(), raster.total());
        let back = rasterize(&decode_neutral(&encode_neutral(&stream)).unwrap(), steps, bin as u64);
        prop_assert_eq!(back, raster);
    }

    #[test]
    fn truncated_neutral_files_are_rejected(events in arb_events(), cut in 1usize..40) {
        let stream = EventStream { geometry: Geometry::NMNIST, events, label: 1 };
        let mut bytes = encode_neutral(&stream);
        let cut = cut.min(bytes.len());
        bytes.truncate(bytes.len() - cut);
        prop_assert!(decode_neutral(&bytes).is_err());
    }
}

#[test]
fn checkpoint_round_trip_keeps_parameters_and_config() {
    let mut hp = Hyperparams::default();
    hp.lr_th = 0.0004;
    hp.hidden = vec![5, 3];
    let spec: NetworkSpec = "7-5-3-2".parse().unwrap();
    let net = init_network::<f64>(&spec, &hp, 11);
    let state = AdamState::new(&net);
    let back = checkpoint::decode::<f64>(&checkpoint::encode(&net, Some(&state))).unwrap();
    assert_eq!(back.net, net);
    assert_eq!(back.net.hp, hp);
    assert_eq!(back.optimizer.unwrap(), state);
    assert_eq!(back.net.fingerprint(), net.fingerprint());

    let f32_net = checkpoint::decode::<f32>(&checkpoint::encode(&net, None))
        .unwrap()
        .net;
    assert_eq!(f32_net.spec, net.spec);
    assert!(
        (f32_net.layers[0].weights.get(0, 0) as f64 - net.layers[0].weights.get(0, 0)).abs() < 1e-6
    );
}
