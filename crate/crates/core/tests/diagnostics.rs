use catpose::diagnostics::*;
use catpose::grouping::{Provenance, RoutingTable};
use catpose::losses::LossWeights;
use catpose::numgrad::{Block, Tape};
use catpose::posenet::Capacity;
use catpose::synthdata::{generate_dataset, DataConfig, Dataset, Heterogeneity, Instance};
use catpose::trainer::{batch_loss, new_model, train, ModelShape, RoutingSource, TrainConfig, TrainOptions};
use catpose::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randvec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (sq_norm(a).sqrt() * sq_norm(b).sqrt())
}

#[test]
fn pairwise_cosine_examples() {
    assert_eq!(s_cc(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
    assert_eq!(s_cc(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert_eq!(s_cc(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
    assert!(matches!(s_cc(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numerical(_))));
}

#[test]
fn category_to_all_examples() {
    let gs = vec![vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 2.0]];
    assert_eq!(s_ca(0, &gs, Weighting::Uniform, &[1, 1]).unwrap(), s_cc(&gs[0], &gs[1]).unwrap());
    let same = vec![vec![0.5, -1.0]; 4];
    assert!((s_ca(2, &same, Weighting::Uniform, &[1; 4]).unwrap() - 1.0).abs() < 1e-15);
    let gs = vec![vec![1.0, 0.0], vec![2.0, 1.0], vec![4.0, 1.0]];
    let opp = vec![vec![-3.0, -1.0], gs[1].clone(), gs[2].clone()];
    assert!((s_ca(0, &opp, Weighting::Uniform, &[1; 3]).unwrap() + 1.0).abs() < 1e-15);
    // frequency weighting pulls the aggregate toward the larger category
    let u = s_ca(0, &gs, Weighting::Uniform, &[1, 1, 1]).unwrap();
    let f = s_ca(0, &gs, Weighting::Frequency, &[1, 1, 9]).unwrap();
    let expect = cosine(&gs[0], &[(2.0 + 36.0) / 10.0, (1.0 + 9.0) / 10.0]);
    assert!((f - expect).abs() < 1e-15);
    assert_ne!(u, f);
}

#[test]
fn contention_stats_examples() {
    let same = vec![vec![1.0, -2.0, 3.0]; 3];
    let r = block_report(&same, &[1; 3], "psi", Weighting::Uniform).unwrap();
    assert!((r.mu_cc.unwrap() - 1.0).abs() < 1e-15);
    assert!(r.var_cc.unwrap() < 1e-30);
    assert!(r.nbar.unwrap().abs() < 1e-15);
    assert_eq!(r.r_theta, 0.0);

    let anti = vec![vec![1.0, 2.0], vec![-1.0, -2.0]];
    let r = block_report(&anti, &[1; 2], "phi", Weighting::Uniform).unwrap();
    assert_eq!(r.mu_cc, Some(-1.0));
    assert_eq!(r.n_c, vec![Some(2.0), Some(2.0)]);
    assert!(r.r_theta.is_infinite());
    assert!(!r.warnings.is_empty());
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"r_theta\":\"inf\""));
    let back: BlockReport = serde_json::from_str(&json).unwrap();
    assert!(back.r_theta.is_infinite());
}

#[test]
fn contention_stats_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let k = 2 + trial % 6;
        let gs: Vec<Vec<f64>> = (0..k).map(|_| randvec(&mut rng, 40, 10f64.powi(trial as i32 % 5 - 2))).collect();
        let r = block_report(&gs, &vec![1; k], "x", Weighting::Uniform).unwrap();
        let mut vals = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if i < j {
                    vals.push(cosine(&gs[i], &gs[j]));
                }
                let sij = r.s_cc[i][j].unwrap();
                assert_eq!(sij, r.s_cc[j][i].unwrap());
                assert!((-1.0..=1.0).contains(&sij));
            }
            assert_eq!(r.s_cc[i][i], Some(1.0));
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((r.mu_cc.unwrap() - mu).abs() < 1e-12);
        assert!((r.var_cc.unwrap() - var).abs() < 1e-12);
        let mut nbar = 0.0;
        for c in 0..k {
            let mut other = vec![0.0; 40];
            for (j, g) in gs.iter().enumerate() {
                if j != c {
                    for (o, x) in other.iter_mut().zip(g) {
                        *o += x / (k - 1) as f64;
                    }
                }
            }
            let n = 1.0 - cosine(&gs[c], &other);
            assert!((r.n_c[c].unwrap() - n).abs() < 1e-12);
            nbar += n / k as f64;
        }
        assert!((r.nbar.unwrap() - nbar).abs() < 1e-12);
    }
}

#[test]
fn zero_gradient_pairs_are_excluded_and_counted() {
    let gs = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]];
    let r = block_report(&gs, &[1; 3], "phi_2", Weighting::Uniform).unwrap();
    assert_eq!(r.excluded_pairs, 2);
    assert_eq!(r.s_cc[0][1], None);
    assert_eq!(r.mu_cc, Some(cosine(&gs[0], &gs[2])));
    assert_eq!(r.n_c[1], None);
    assert!(r.warnings.iter().any(|w| w.contains("2 category pairs")));
}

#[test]
fn decomposition_identities() {
    // small integers keep every operation exact
    let gs = vec![vec![1.0, 4.0, -2.0], vec![3.0, 0.0, 2.0], vec![-1.0, 2.0, 6.0], vec![5.0, 2.0, -2.0]];
    let d = decompose(&gs).unwrap();
    for i in 0..3 {
        assert_eq!(d.v.iter().map(|v| v[i]).sum::<f64>(), 0.0);
    }
    for (g, v) in gs.iter().zip(&d.v) {
        let back: Vec<f64> = d.u.iter().zip(v).map(|(a, b)| a + b).collect();
        assert_eq!(&back, g);
    }
    let equal = decompose(&vec![vec![0.3, -0.7]; 5]).unwrap();
    assert!(equal.v.iter().flatten().all(|&x| x == 0.0));
    assert_eq!(heterogeneity_ratio(&equal.u, &equal.v), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gs: Vec<Vec<f64>> = (0..6).map(|_| randvec(&mut rng, 50, 1.0)).collect();
    let d = decompose(&gs).unwrap();
    for i in 0..50 {
        assert!(d.v.iter().map(|v| v[i]).sum::<f64>().abs() < 1e-14);
    }
    for c in 0..6 {
        assert!((d.uv[c] - dot(&d.u, &d.v[c])).abs() == 0.0);
    }
}

#[test]
fn heterogeneity_ratio_examples() {
    let u = [1.0, 0.0, 0.0];
    assert_eq!(heterogeneity_ratio(&u, &[vec![0.0; 3], vec![0.0; 3]]), 0.0);
    assert_eq!(heterogeneity_ratio(&u, &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]), 1.0);
    let s = 3f64.sqrt();
    let r = heterogeneity_ratio(&u, &[vec![0.0, s, 0.0], vec![0.0, 0.0, s], vec![0.0, -s, 0.0]]);
    assert!((r - 3.0).abs() < 1e-15);
    assert!(heterogeneity_ratio(&[0.0; 3], &[vec![1.0, 0.0, 0.0]]).is_infinite());
}

#[test]
fn closed_forms_match_direct_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let m = 10f64.powf(rng.random_range(-3.0..3.0));
        let u = randvec(&mut rng, 12, m);
        let (sa, sb) = (m * rng.random_range(0.1..3.0), m * rng.random_range(0.1..3.0));
        let a = randvec(&mut rng, 12, sa);
        let b = randvec(&mut rng, 12, sb);
        let ga: Vec<f64> = u.iter().zip(&a).map(|(x, y)| x + y).collect();
        let gb: Vec<f64> = u.iter().zip(&b).map(|(x, y)| x + y).collect();
        let exact = closed_form_scc(&u, &a, &b, ClosedForm::Exact);
        assert!((exact - cosine(&ga, &gb)).abs() < 1e-12);
        assert!((closed_form_sca(&u, &a, &b, ClosedForm::Exact) - exact).abs() == 0.0);
    }
    // cross terms vanish by construction
    let u = [2.0, 0.0, 0.0, 0.0];
    let a = [0.0, 1.0, -2.0, 0.5];
    let b = [0.0, 3.0, 1.0, -1.0];
    assert_eq!(closed_form_scc(&u, &a, &b, ClosedForm::Approx), closed_form_scc(&u, &a, &b, ClosedForm::Exact));
    for r in [0.0f64, 0.5, 1.0, 3.0] {
        let (u, v1, v2) = ([1.0, 0.0, 0.0], [0.0, r.sqrt(), 0.0], [0.0, 0.0, r.sqrt()]);
        assert!((closed_form_scc(&u, &v1, &v2, ClosedForm::Exact) - 1.0 / (1.0 + r)).abs() < 1e-15);
    }
}

#[test]
fn normalized_forms_examples() {
    let u = vec![1.0, 0.0, 0.0];
    let v = vec![vec![0.0, 1.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, -3.0, 0.0]];
    let f = normalized_forms(&u, &v).unwrap();
    assert_eq!(f.rho_cc[0][1], Some(1.0));
    assert_eq!(f.rho_cc[0][2], Some(-1.0));
    assert_eq!(f.rho_cc[1][1], None);
    assert_eq!(f.alpha, vec![1.0, 4.0, 9.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let k = rng.random_range(2..7);
        let m = 10f64.powf(rng.random_range(-3.0..3.0));
        let u = randvec(&mut rng, 9, m);
        let v: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let s = m * rng.random_range(0.0..2.0);
                randvec(&mut rng, 9, s)
            })
            .collect();
        let f = normalized_forms(&u, &v).unwrap();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let rho = f.rho_cc[i][j].unwrap();
                    assert!((-1.0..=1.0).contains(&rho));
                    let approx = closed_form_scc(&u, &v[i], &v[j], ClosedForm::Approx);
                    assert!((f.pred_scc[i][j] - approx).abs() < 1e-12);
                }
            }
            let vn: Vec<f64> = (0..9).map(|d| (0..k).filter(|&j| j != i).map(|j| v[j][d]).sum::<f64>() / (k - 1) as f64).collect();
            assert!((f.pred_sca[i] - closed_form_sca(&u, &v[i], &vn, ClosedForm::Approx)).abs() < 1e-12);
            assert!((f.beta[i] - sq_norm(&vn) / sq_norm(&u)).abs() < 1e-12 * (1.0 + f.beta[i]));
        }
    }
}

#[test]
fn scaling_law_examples() {
    let rows = scaling_law_check(&[0.0, 1.0, 3.0], 5, 4, 16, 2).unwrap();
    assert!((rows[0].mean_scc - 1.0).abs() < 1e-12);
    assert!((rows[1].mean_scc - 0.5).abs() < 1e-12);
    assert!((rows[2].mean_scc - 0.25).abs() < 1e-12);
    for r in &rows {
        assert_eq!(r.predicted, 1.0 / (1.0 + r.r));
    }
    assert!(scaling_law_check(&[1.0], 1, 4, 4, 0).is_err());
}

fn tiny_setup(k: usize, seed: u64) -> (Dataset, TrainConfig) {
    let mut dc = DataConfig::new(k, 16, seed, Heterogeneity::Graded);
    dc.train_per_category = 4;
    dc.test_per_category = 1;
    let mut cfg = TrainConfig::new(16, RoutingSource::None, seed);
    cfg.model = ModelShape::tiny();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.lr.cycle = 8;
    (generate_dataset(&dc).unwrap(), cfg)
}

fn branched(k: usize) -> RoutingTable {
    RoutingTable {
        gamma: (0..k).map(|c| c % 2).collect(),
        alpha: vec![Capacity::H, Capacity::L],
        provenance: Provenance::default(),
    }
}

#[test]
fn single_batch_replay_returns_that_batch_gradient() {
    let (ds, cfg) = tiny_setup(2, 1);
    let tr = ds.split("train").unwrap();
    let routing = branched(2);
    let model = new_model(&cfg, &routing).unwrap();
    let plan = ReplayPlan::sample(tr, 2, 1, 2, 5).unwrap();
    let w = LossWeights::default();
    let table = replay_collect(&model, &routing, tr, &plan, &w, 0).unwrap();
    let names: Vec<&str> = table.blocks.iter().map(|b| b.block.as_str()).collect();
    assert_eq!(names, ["psi", "phi", "omega", "phi_1", "phi_2"]);
    for (c, idx) in &plan.batches {
        let batch: Vec<&Instance> = idx.iter().map(|&i| &tr[i]).collect();
        let mut t = Tape::new();
        let l = batch_loss(&model, &mut t, &batch, routing.gamma[*c], &w).unwrap();
        let g = t.backward(l, &model.store).unwrap();
        assert_eq!(table.block("psi").unwrap().per_category[*c], g.flatten(&model.store, |b| b == Block::Psi));
        assert_eq!(table.block("phi").unwrap().per_category[*c], g.flatten(&model.store, |b| b.is_branch()));
    }
    for b in &table.blocks {
        assert_eq!(b.complement[0], b.per_category[1]);
        assert_eq!(b.complement[1], b.per_category[0]);
        let len = b.per_category[0].len();
        assert!(b.per_category.iter().chain(&b.complement).all(|v| v.len() == len));
    }
    assert_eq!(table.block("psi").unwrap().per_category[0].len(), model.param_count(Block::Psi));
    // category 0 never touches branch 2
    assert!(table.block("phi_2").unwrap().per_category[0].iter().all(|&x| x == 0.0));
    let again = replay_collect(&model, &routing, tr, &plan, &w, 0).unwrap();
    assert_eq!(table, again);
}

#[test]
fn replay_rejects_a_category_without_batches() {
    let (ds, cfg) = tiny_setup(3, 2);
    let tr = ds.split("train").unwrap();
    let routing = branched(3);
    let model = new_model(&cfg, &routing).unwrap();
    let mut plan = ReplayPlan::sample(tr, 3, 2, 2, 5).unwrap();
    plan.batches.retain(|(c, _)| *c != 1);
    let err = replay_collect(&model, &routing, tr, &plan, &LossWeights::default(), 0).unwrap_err();
    assert!(err.to_string().contains("category 1"), "{err}");
}

#[test]
fn replay_plan_is_seeded_and_single_category() {
    let (ds, _) = tiny_setup(3, 3);
    let tr = ds.split("train").unwrap();
    let a = ReplayPlan::sample(tr, 3, 8, 3, 11).unwrap();
    assert_eq!(a, ReplayPlan::sample(tr, 3, 8, 3, 11).unwrap());
    assert_ne!(a, ReplayPlan::sample(tr, 3, 8, 3, 12).unwrap());
    assert_eq!(a.counts(3), vec![8, 8, 8]);
    assert!(a.batches.iter().all(|(c, b)| b.len() == 3 && b.iter().all(|&i| tr[i].category == *c)));
}

#[test]
fn diagnose_run_outputs_are_reproducible() {
    let (ds, cfg) = tiny_setup(3, 4);
    let tr = ds.split("train").unwrap();
    let routing = branched(3);
    let run = tempfile::tempdir().unwrap();
    train(&cfg, 3, tr, &routing, TrainOptions { out_dir: Some(run.path().into()), ..Default::default() }).unwrap();
    let ckpts = list_checkpoints(run.path()).unwrap();
    assert_eq!(ckpts.len(), 2);
    let opts = DiagnoseOptions { batch_size: 2, batches_per_category: 2, ..Default::default() };
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let reports = diagnose_run(&ckpts, tr, 3, &opts, Some(out1.path())).unwrap();
    diagnose_run(&ckpts, tr, 3, &opts, Some(out2.path())).unwrap();
    assert_eq!(reports.len(), 2);
    let mut files: Vec<String> =
        std::fs::read_dir(out1.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files.iter().filter(|f| f.starts_with("report_epoch_")).count(), 2);
    assert_eq!(files.iter().filter(|f| f.starts_with("scc_epoch_")).count(), 10);
    for f in &files {
        assert_eq!(std::fs::read(out1.path().join(f)).unwrap(), std::fs::read(out2.path().join(f)).unwrap(), "{f}");
    }
    let ts = std::fs::read_to_string(out1.path().join("timeseries.csv")).unwrap();
    let mut blocks: Vec<&str> = ts.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    blocks.sort();
    blocks.dedup();
    assert_eq!(blocks, ["omega", "phi", "phi_1", "phi_2", "psi"]);
    assert!(ts.starts_with("epoch,block,mu_cc,var_cc,nbar,r_theta\n"));
}
