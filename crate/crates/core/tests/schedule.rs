mod common;

use epas::model::ModelConfig;
use epas::schedule::SharingSchedule;
use proptest::prelude::*;

use common::simulate;

fn schedule_strategy() -> impl Strategy<Value = (SharingSchedule, usize)> {
    (2usize..24, 1usize..6, 1usize..60, 0usize..400).prop_flat_map(|(l, b, interval, total)| {
        let max_groups = (l - 1) / b;
        (1..=max_groups.max(1)).prop_map(move |groups| {
            let b = if max_groups == 0 { 1 } else { b };
            let n = (groups * b).min(l - 1);
            let target: Vec<usize> = (l - n..l).collect();
            (SharingSchedule::new(interval, b, target, l), total)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn active_set_matches_loop_simulation((s, total) in schedule_strategy()) {
        let c = ModelConfig { n_layers: s.n_layers, ..ModelConfig::toy() };
        prop_assume!(s.validate(&c).is_ok());
        let sim = simulate(s.interval, s.growth, &s.target, total);
        for (t, expected) in sim.iter().enumerate() {
            prop_assert_eq!(&s.active_set(t), expected, "step {}", t);
        }
    }

    #[test]
    fn monotone_deep_first_and_terminal((s, total) in schedule_strategy()) {
        let mut prev: Vec<usize> = Vec::new();
        for t in 0..=total {
            let cur = s.active_set(t);
            prop_assert!(prev.iter().all(|l| cur.contains(l)));
            let added: Vec<_> = cur.iter().filter(|l| !prev.contains(l)).collect();
            if let (Some(&&hi), Some(&&lo)) = (added.iter().max(), prev.iter().min().as_ref()) {
                prop_assert!(hi < lo);
            }
            prop_assert_eq!(cur.len() % s.growth, 0);
            prev = cur;
        }
        let end = s.terminal_step();
        prop_assert_eq!(s.active_set(end), s.target.clone());
        prop_assert_eq!(s.active_set(end + 17), s.target.clone());
    }

    #[test]
    fn events_replay_active_set((s, total) in schedule_strategy()) {
        let events = s.growth_events(total);
        let mut set: Vec<usize> = Vec::new();
        let mut next = events.iter().peekable();
        for t in 0..=total {
            while let Some(e) = next.next_if(|e| e.step == t) {
                set.splice(0..0, e.layers.iter().copied());
            }
            prop_assert_eq!(&s.active_set(t), &set);
        }
    }
}

#[test]
fn five_layer_figure_replays_event_for_event() {
    let s = SharingSchedule::new(1, 1, vec![2, 3, 4], 5);
    let ev = s.growth_events(3);
    assert_eq!(ev.iter().map(|e| (e.step, e.layers.clone())).collect::<Vec<_>>(), vec![
        (1, vec![4]),
        (2, vec![3]),
        (3, vec![2])
    ]);
    assert_eq!(simulate(1, 1, &[2, 3, 4], 4), vec![vec![], vec![4], vec![3, 4], vec![2, 3, 4]]);
}

#[test]
fn calls_are_history_independent() {
    let s = SharingSchedule::new(10, 2, (10..22).collect(), 22);
    let fresh = s.active_set(35);
    for t in [1000, 0, 7, 35, 3] {
        s.active_set(t);
    }
    assert_eq!(s.active_set(35), fresh);
}
