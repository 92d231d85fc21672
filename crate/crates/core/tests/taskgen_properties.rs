use loopvla::taskgen::{generate_split, Difficulty};

#[test]
fn expert_always_succeeds_and_difficulty_orders_horizons() {
    let mut means = Vec::new();
    for d in Difficulty::ALL {
        let eps = generate_split(d, 0..1000);
        let mut total = 0usize;
        for ep in &eps {
            let replay = ep.replay();
            assert_eq!(replay, ep.observations, "replay drift for {d}");
            assert!(d.success(replay.last().unwrap()), "expert failed on {d}");
            assert!(ep.horizon() <= d.max_horizon());
            total += ep.horizon();
        }
        let mean = total as f64 / eps.len() as f64;
        println!("{d}: mean horizon {mean:.2}");
        means.push(mean);
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}
