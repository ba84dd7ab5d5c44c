mod support;

#[test]
fn critic_learns_the_two_state_chain_values() {
    support::toy_mdp().unwrap();
}

#[test]
fn sign_test_tail_is_exact() {
    assert!((support::sign_test_p(20, 20) - 0.5f64.powi(20)).abs() < 1e-18);
    assert!((support::sign_test_p(0, 20) - 1.0).abs() < 1e-12);
    assert!((support::sign_test_p(15, 20) - 0.020_694_732_666_015_625).abs() < 1e-12);
}
