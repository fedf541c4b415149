mod common;

#[test]
fn backprop_matches_finite_differences_on_random_nets() {
    common::check_backprop(2024, 20).unwrap();
}

#[test]
fn actor_gradient_through_critic_action_input() {
    common::check_actor_composite(77, 20).unwrap();
}
