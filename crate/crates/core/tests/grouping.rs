use std::collections::BTreeMap;

use catpose::grouping::*;
use catpose::posenet::Capacity;
use catpose::Error;

fn sizes(gamma: &[usize], g: usize) -> Vec<usize> {
    let mut s = vec![0; g];
    for &x in gamma {
        s[x] += 1;
    }
    s
}

fn table() -> DifficultyTable {
    DifficultyTable::from_difficulty(vec![0.7, 0.1, 0.45, 0.9, 0.3, 0.2])
}

#[test]
fn difficulty_from_rates() {
    let rates: BTreeMap<usize, f64> = [(0, 1.0), (1, 0.57), (2, 0.2)].into();
    let d = compute_difficulty(&rates, 3).unwrap();
    assert_eq!(d.difficulty[0], 0.0);
    assert!((d.difficulty[1] - 0.43).abs() < 1e-15);
    assert!(d.difficulty[2] > d.difficulty[1]);
    assert!(matches!(compute_difficulty(&rates, 4), Err(Error::MissingData(_))));
}

#[test]
fn floor_boundaries() {
    assert_eq!(boundaries(6, 3), vec![0, 2, 4, 6]);
    assert_eq!(boundaries(6, 4), vec![0, 1, 3, 4, 6]);
    let d = table();
    assert_eq!(sizes(&quantile_partition(&d, 3).unwrap(), 3), vec![2, 2, 2]);
    assert_eq!(sizes(&quantile_partition(&d, 4).unwrap(), 4), vec![1, 2, 1, 2]);
    assert_eq!(quantile_partition(&d, 1).unwrap(), vec![0; 6]);
    assert!(quantile_partition(&d, 7).is_err());
}

#[test]
fn groups_are_monotone_in_difficulty() {
    let d = table();
    let gamma = quantile_partition(&d, 3).unwrap();
    assert_eq!(gamma, vec![2, 0, 1, 2, 1, 0]);
    for g in 0..2 {
        let hi = (0..6).filter(|&c| gamma[c] == g).map(|c| d.difficulty[c]).fold(f64::MIN, f64::max);
        let lo = (0..6).filter(|&c| gamma[c] == g + 1).map(|c| d.difficulty[c]).fold(f64::MAX, f64::min);
        assert!(hi <= lo);
    }
}

#[test]
fn ties_break_by_category_id() {
    let d = DifficultyTable::from_difficulty(vec![0.5; 4]);
    assert_eq!(quantile_partition(&d, 2).unwrap(), vec![0, 0, 1, 1]);
}

#[test]
fn refinement_follows_strict_improvement() {
    let d = table();
    let gamma0 = quantile_partition(&d, 3).unwrap();
    // never better in the harder group
    let mut flat = |_: &[usize], _: usize| Ok(0.5);
    let (g, log) = boundary_refine(&gamma0, &d, 3, &mut flat).unwrap();
    assert_eq!(g, gamma0);
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|s| !s.moved));

    // rigged: only boundary 2's category (id 2, difficulty 0.45) prefers moving
    let mut rigged = |gm: &[usize], c: usize| Ok(if c == 2 && gm[c] == 2 { 0.9 } else { 0.4 });
    let (g, log) = boundary_refine(&gamma0, &d, 3, &mut rigged).unwrap();
    let moved: Vec<_> = (0..6).filter(|&c| g[c] != gamma0[c]).collect();
    assert_eq!(moved, vec![2]);
    assert_eq!(g[2], gamma0[2] + 1);
    assert_eq!(log.iter().filter(|s| s.moved).count(), 1);
    assert_eq!((log[1].s_g, log[1].s_g_plus_1), (0.4, 0.9));

    // boundary categories are the hardest of each lower group
    assert_eq!(log.iter().map(|s| s.category).collect::<Vec<_>>(), vec![5, 2]);
}

#[test]
fn refinement_ties_stay() {
    let d = table();
    let gamma0 = quantile_partition(&d, 3).unwrap();
    let mut equal = |_: &[usize], _: usize| Ok(0.7);
    assert_eq!(boundary_refine(&gamma0, &d, 3, &mut equal).unwrap().0, gamma0);
}

#[test]
fn pilot_failure_names_boundary() {
    let d = table();
    let gamma0 = quantile_partition(&d, 3).unwrap();
    let mut failing = |_: &[usize], c: usize| if c == 2 { Err(Error::Numerical("boom".into())) } else { Ok(0.0) };
    match boundary_refine(&gamma0, &d, 3, &mut failing) {
        Err(Error::Pilot { boundary, .. }) => assert_eq!(boundary, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn capacity_by_median() {
    let d = DifficultyTable::from_difficulty(vec![0.1, 0.1, 0.5, 0.5, 0.9, 0.9]);
    let gamma = quantile_partition(&d, 3).unwrap();
    assert_eq!(allocate_capacity(&gamma, &d, 3).0, vec![Capacity::H, Capacity::L, Capacity::L]);
    let eq = DifficultyTable::from_difficulty(vec![0.4; 6]);
    let gamma = quantile_partition(&eq, 3).unwrap();
    assert_eq!(allocate_capacity(&gamma, &eq, 3).0, vec![Capacity::L; 3]);
    assert_eq!(allocate_capacity(&[0; 6], &d, 1).0, vec![Capacity::L]);
}

#[test]
fn shift_invariance() {
    let d = table();
    let shifted = DifficultyTable::from_difficulty(d.difficulty.iter().map(|x| x + 0.125).collect());
    for g in 1..=6 {
        let a = build_routing(&d, g, None, "ref", 0).unwrap();
        let b = build_routing(&shifted, g, None, "ref", 0).unwrap();
        assert_eq!((a.gamma, a.alpha), (b.gamma, b.alpha));
    }
}

#[test]
fn json_roundtrip_and_validation() {
    let d = table();
    let r = build_routing(&d, 3, None, "baseline", 4).unwrap();
    let back = RoutingTable::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_json().unwrap().contains("\"alpha\""));
    assert!(matches!(r.validate(5), Err(Error::Routing(_))));
}

#[test]
fn random_routing_keeps_sizes() {
    let d = table();
    let r = random_routing(&d, 4, 9).unwrap();
    assert_eq!(r.group_sizes(), vec![1, 2, 1, 2]);
    assert_eq!(r, random_routing(&d, 4, 9).unwrap());
}
