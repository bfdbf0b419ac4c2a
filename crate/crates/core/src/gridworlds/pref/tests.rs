use super::*;
use crate::taskspace::{SamplerKind, TaskMask};

fn env(seed: u64) -> PrefEnv {
    PrefEnv::new(&mut RngState::new(seed)).unwrap()
}

fn random_z(rng: &mut RngState) -> Vec<f64> {
    (0..MODULES).map(|_| rng.normal()).collect()
}

/// Best discounted return over every action sequence of at most `HORIZON`
/// actions, accumulated forward.
fn brute_force(world: &PrefWorld) -> f64 {
    fn go(w: &PrefWorld, cell: usize, left: Remaining, depth: usize, disc: f64, acc: f64, best: &mut f64) {
        *best = best.max(acc);
        if depth == HORIZON {
            return;
        }
        for a in 0..TERMINATE {
            let (next, rest, r, _) = w.transition(cell, left, a);
            go(w, next, rest, depth + 1, disc * GAMMA, acc + disc * r, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(world, world.agent, world.all_objects(), 0, 1.0, 0.0, &mut best);
    best
}

#[test]
fn shipped_layout_leaves_room() {
    let l = default_layout().unwrap();
    assert_eq!(l.free_cells().len(), 21);
    let d = l.bfs_from(l.free_cells()[0]);
    assert!(l.free_cells().iter().all(|&c| d[c].is_some()));
}

#[test]
fn instances_share_preferences_but_not_placements() {
    let e = env(0);
    let mut rng = RngState::new(1);
    let z = random_z(&mut rng);
    let a = e.instance(&z, &mut rng).unwrap();
    let b = e.instance(&z, &mut rng).unwrap();
    assert_eq!(a.prefs, b.prefs);
    assert_ne!((a.agent, &a.objects), (b.agent, &b.objects));
    let mut cells: Vec<usize> = a.objects.iter().map(|o| o.cell).chain([a.agent]).collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), OBJECTS + 1);
    assert!(cells.iter().all(|&c| !a.layout.is_wall(c)));
}

#[test]
fn placement_is_uniform_over_free_cells() {
    let e = env(0);
    let free = e.layout.free_cells();
    let mut counts = vec![0usize; e.layout.cells()];
    let mut rng = RngState::new(2);
    let n = 10_000;
    let z = vec![0.0; MODULES];
    for _ in 0..n {
        counts[e.instance(&z, &mut rng).unwrap().objects[0].cell] += 1;
    }
    let p = 1.0 / free.len() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for &c in &free {
        assert!(
            (counts[c] as f64 - n as f64 * p).abs() < 3.5 * sd,
            "cell {c}: {}",
            counts[c]
        );
    }
}

#[test]
fn zero_latent_terminates_immediately() {
    let e = env(0);
    let mut rng = RngState::new(3);
    let w = e.instance(&[0.0; MODULES], &mut rng).unwrap();
    assert!(w.prefs.iter().all(|&p| p == 0.0));
    let r = greedy_rollout(&w, &solve_q(&w));
    assert_eq!(r.actions, vec![TERMINATE]);
    assert_eq!(r.ret, 0.0);
}

#[test]
fn negative_preferences_terminate_immediately() {
    let e = env(0);
    let mut rng = RngState::new(4);
    let mut w = e.instance(&[0.0; MODULES], &mut rng).unwrap();
    w.prefs = vec![-1.0; COLORS];
    let r = greedy_rollout(&w, &solve_q(&w));
    assert_eq!(r.actions, vec![TERMINATE]);
}

#[test]
fn adjacent_object_value_is_undiscounted() {
    let layout = Layout::new(2, vec![false, false, true, true]).unwrap();
    let w = PrefWorld {
        layout,
        objects: vec![Object { cell: 1, color: 3 }],
        agent: 0,
        prefs: vec![0.0, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.0],
    };
    let q = solve_q(&w);
    for t in 1..=HORIZON {
        assert_eq!(q.q(t, 0, 1)[1], 0.7);
        assert_eq!(q.q(t, 0, 1)[TERMINATE], 0.0);
    }
    assert_eq!(greedy_rollout(&w, &q).actions, vec![1, TERMINATE]);
}

#[test]
fn backward_induction_matches_brute_force() {
    let e = env(5);
    let mut rng = RngState::new(6);
    for _ in 0..100 {
        let z = random_z(&mut rng);
        let w = e.instance(&z, &mut rng).unwrap();
        let q = solve_q(&w);
        let v = q.value(HORIZON, w.agent, w.all_objects());
        let b = brute_force(&w);
        assert!((v - b).abs() <= 1e-12 * b.abs().max(1.0), "{v} vs {b}");
        let r = greedy_rollout(&w, &q);
        if w.has_positive(w.all_objects()) {
            assert!((r.ret - b).abs() <= 1e-12 * b.abs().max(1.0), "greedy {} vs {b}", r.ret);
        }
    }
}

#[test]
fn rewards_compose_linearly() {
    let e = env(7);
    let mut rng = RngState::new(8);
    for _ in 0..50 {
        let (z1, z2) = (random_z(&mut rng), random_z(&mut rng));
        let z: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let (p, p1, p2) = (
            e.templates.preferences(&z).unwrap(),
            e.templates.preferences(&z1).unwrap(),
            e.templates.preferences(&z2).unwrap(),
        );
        for c in 0..COLORS {
            assert!((p[c] - p1[c] - p2[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn episodes_split_instances() {
    let e = env(9);
    let mut rng = RngState::new(10);
    let mask = TaskMask::parse("11000000").unwrap();
    let latent = TaskMaskSet::new(8, vec![mask], SamplerKind::Continuous)
        .unwrap()
        .sample(&mut rng)
        .unwrap();
    let ep = make_episode(&e, &latent, 32, &mut rng).unwrap();
    assert_eq!(ep.support.y.cols(), ACTIONS);
    assert_eq!(ep.support.x.cols(), OBS_DIM);
    assert!(ep.support.len() >= 16 && ep.support.len() <= 16 * HORIZON);
    assert!(ep.query.len() >= 16 && ep.query.len() <= 16 * HORIZON);
    assert!(make_episode(&e, &latent, 3, &mut rng).is_err());
}

#[test]
fn rollouts_respect_the_horizon() {
    let e = env(11);
    let mut rng = RngState::new(12);
    for _ in 0..200 {
        let w = e.instance(&random_z(&mut rng), &mut rng).unwrap();
        let r = greedy_rollout(&w, &solve_q(&w));
        assert!(!r.actions.is_empty() && r.actions.len() <= HORIZON);
        assert_eq!(r.x.len(), r.y.len());
        assert!(r.actions[..r.actions.len() - 1].iter().all(|&a| a != TERMINATE));
    }
}
