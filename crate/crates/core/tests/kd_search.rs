mod common;

use common::explore_kd;

#[test]
fn no_interleaving_leaks_the_key_early() {
    for c in 1..=4 {
        let r = explore_kd(c, 2);
        assert!(r.violations.is_empty(), "c = {c}: {:?}", &r.violations[..r.violations.len().min(5)]);
        assert_eq!(r.deadlocks, 0, "c = {c}");
        assert_eq!(r.stuck, 0, "c = {c}");
        assert_eq!(r.completed_rounds.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert!(r.rejected > r.transitions);
    }
}

#[test]
fn state_space_grows_with_participants() {
    let sizes: Vec<usize> = (1..=4).map(|c| explore_kd(c, 1).states).collect();
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
}
