mod support;

use vstb::attention::ForceSpec;
use vstb::environment::{CueValidity, DeltaSpec, Location, TrialRequest};
use vstb::environment::sample_trial;

#[test]
fn zeroing_the_changed_column_isolates_the_other_slots() {
    support::isolation(50).unwrap();
}

fn trial() -> vstb::environment::TrialSpec {
    let mut req = TrialRequest::new(Location::S2, CueValidity::new(1.0).unwrap(), DeltaSpec::Fixed(30.0));
    req.force_change = Some(true);
    sample_trial(5, &req).unwrap()
}

#[test]
fn forcing_the_natural_map_reproduces_the_unforced_run() {
    let (encoder, store, agent) = support::random_model(41);
    let spec = trial();
    let free = support::core_trace(&encoder, &store, &agent, &spec, &|_| Vec::new()).unwrap();
    let maps = free.maps(0).unwrap();
    let forced = support::core_trace(&encoder, &store, &agent, &spec, &|t| vec![ForceSpec::Map(maps[t].clone())]).unwrap();
    for t in 0..free.h.len() {
        let bits = |h: &vstb::Tensor<f32>| h.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&free.h[t]), bits(&forced.h[t]), "t={t}");
    }
}

#[test]
fn uniform_forcing_spreads_attention_evenly() {
    let (encoder, store, agent) = support::random_model(42);
    let trace = support::core_trace(&encoder, &store, &agent, &trial(), &|_| vec![ForceSpec::Uniform]).unwrap();
    for map in trace.maps(0).unwrap() {
        for &a in map.values() {
            assert!((a - 0.25).abs() < 1e-6, "{a}");
        }
    }
}
