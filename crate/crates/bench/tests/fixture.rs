use dlpo_bench::Fixture;

#[test]
fn fixture_batch_is_scored() {
    let f = Fixture::new(0);
    let batch = f.batch(2);
    assert_eq!(batch.len(), 2);
    for t in &batch {
        let r = t.terminal_reward.expect("scored");
        assert!((1.0..=5.0).contains(&r));
    }
}
