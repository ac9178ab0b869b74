//! End-to-end acceptance checks. Each test prints one PASS or FAIL line
//! before asserting. Criteria 6 to 8 share one multi-seed campaign, run once
//! per process.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use catpose::diagnostics::*;
use catpose::experiment::{desk_data_config, run_campaign, CampaignConfig, SeedResult};
use catpose::grouping::*;
use catpose::losses::{instance_objective, LossWeights};
use catpose::numgrad::check::{check_op, check_params_where, CheckOptions, DIFFERENTIABLE_OPS};
use catpose::numgrad::Block;
use catpose::posenet::{Capacity, ModelConfig, PoseNet};
use catpose::synthdata::*;
use catpose::trainer::*;
use catpose::Error;

fn verdict(n: usize, name: &str, ok: bool, detail: String) {
    // the raw handle bypasses test output capture, so passing checks report too
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} criterion {n}: {name} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

/// Uniform entries in [-1, 1) scaled by a log-uniform magnitude.
fn draw_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = log_uniform(rng, 1e-3, 1e3);
    (0..dim).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

#[test]
fn criterion_1_closed_forms_match_direct_cosines() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (k, dim) = (5, 48);
    let (mut worst_exact, mut worst_rewritten) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let u = draw_vec(&mut rng, dim);
        let mut v: Vec<Vec<f64>> = (0..k).map(|_| draw_vec(&mut rng, dim)).collect();
        // centre the deviations so they sum to zero, as a decomposition would
        for i in 0..dim {
            let m = v.iter().map(|x| x[i]).sum::<f64>() / k as f64;
            v.iter_mut().for_each(|x| x[i] -= m);
        }
        let g: Vec<Vec<f64>> = v.iter().map(|vc| u.iter().zip(vc).map(|(a, b)| a + b).collect()).collect();
        let forms = normalized_forms(&u, &v).unwrap();
        let ones = vec![1.0; k];
        for c in 0..k {
            let v_not = mean_of_others(c, &v, &ones).unwrap();
            for c2 in 0..k {
                if c2 == c {
                    continue;
                }
                let direct = s_cc(&g[c], &g[c2]).unwrap();
                worst_exact = worst_exact.max((closed_form_scc(&u, &v[c], &v[c2], ClosedForm::Exact) - direct).abs());
                let approx = closed_form_scc(&u, &v[c], &v[c2], ClosedForm::Approx);
                worst_rewritten = worst_rewritten.max((forms.pred_scc[c][c2] - approx).abs());
            }
            let direct = s_ca(c, &g, Weighting::Uniform, &[]).unwrap();
            worst_exact = worst_exact.max((closed_form_sca(&u, &v[c], &v_not, ClosedForm::Exact) - direct).abs());
            let approx = closed_form_sca(&u, &v[c], &v_not, ClosedForm::Approx);
            worst_rewritten = worst_rewritten.max((forms.pred_sca[c] - approx).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "closed forms",
        worst_exact <= 1e-10 && worst_rewritten <= 1e-12 && within(elapsed, 5.0),
        format!("exact max err {worst_exact:.2e}, rewritten max err {worst_rewritten:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_2_scaling_law() {
    let start = Instant::now();
    let rows = scaling_law_check(&[0.0, 0.5, 1.0, 3.0], 200, 5, 24, 7).unwrap();
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| (r.mean_scc - 1.0 / (1.0 + r.r)).abs()).fold(0.0, f64::max);
    let summary: Vec<String> = rows.iter().map(|r| format!("r={} mean={:.12}", r.r, r.mean_scc)).collect();
    verdict(
        2,
        "scaling law",
        worst <= 1e-9 && rows.iter().all(|r| r.predicted == 1.0 / (1.0 + r.r)) && within(elapsed, 1.0),
        format!("{}, max err {worst:.2e}, {elapsed:.2?}", summary.join(", ")),
    );
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let start = Instant::now();
    let opts = CheckOptions::default();
    let mut op_failures = Vec::new();
    let mut op_checked = 0;
    for &kind in DIFFERENTIABLE_OPS {
        for seed in 0..50 {
            let rep = check_op(kind, seed, opts).unwrap();
            op_checked += rep.checked;
            if !rep.passed() {
                op_failures.push(format!("{kind:?}/{seed}"));
            }
        }
    }

    // Both capacities in one model; each seed routes through one branch and
    // probes every fifth coordinate at an offset, so 50 seeds cover every
    // parameter several times at different points.
    let specs = make_category_specs(2, Heterogeneity::Graded, 0).unwrap();
    let w = LossWeights::default();
    let (mut model_checked, mut model_skipped, mut worst) = (0, 0, 0.0f64);
    let mut model_failures = Vec::new();
    for seed in 0..50u64 {
        let model = PoseNet::<f64>::new(ModelConfig::tiny(vec![Capacity::H, Capacity::L]), seed).unwrap();
        let g = (seed % 2) as usize;
        let inst = sample_instance(&specs[g], 16, 0.005, seed as u32).unwrap();
        let rep = check_params_where(
            &model.store,
            |t, v| Ok(instance_objective(&model, t, v, &inst.observed, &inst.pose, g, &w)?.total),
            opts,
            |p, k| !matches!(p.block, Block::Phi(h) if h != g) && (k as u64 + seed) % 5 == 0,
        )
        .unwrap();
        model_checked += rep.checked;
        model_skipped += rep.skipped;
        worst = worst.max(rep.max_rel_err);
        if !rep.passed() {
            model_failures.push(format!("seed {seed}: {:?}", &rep.failures[..rep.failures.len().min(3)]));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "finite-difference gradients",
        op_failures.is_empty() && model_failures.is_empty() && within(elapsed, 120.0),
        format!(
            "{} ops x 50 seeds, {op_checked} op coords; model {model_checked} coords checked, {model_skipped} kink-adjacent skipped, max rel err {worst:.2e}; failures {:?} {:?}; {elapsed:.2?}",
            DIFFERENTIABLE_OPS.len(),
            op_failures,
            model_failures
        ),
    );
}

/// Scores fixed per (category, group it would sit in).
struct Rigged(BTreeMap<(usize, usize), f64>);

impl Pilot for Rigged {
    fn score(&mut self, gamma: &[usize], category: usize) -> catpose::Result<f64> {
        Ok(*self.0.get(&(category, gamma[category])).unwrap_or(&0.0))
    }
}

fn sizes(gamma: &[usize], g: usize) -> Vec<usize> {
    let mut s = vec![0; g];
    gamma.iter().for_each(|&x| s[x] += 1);
    s
}

#[test]
fn criterion_4_grouping_algorithm() {
    let d = DifficultyTable::from_difficulty(vec![0.7, 0.1, 0.45, 0.9, 0.3, 0.2]);
    let s3 = sizes(&quantile_partition(&d, 3).unwrap(), 3);
    let s4 = sizes(&quantile_partition(&d, 4).unwrap(), 4);
    let mut ok = s3 == [2, 2, 2] && s4 == [1, 2, 1, 2];

    // order by difficulty: 1, 5, 4, 2, 0, 3; boundary categories for G=3 are
    // 5 (between groups 0 and 1) and 2 (between groups 1 and 2)
    let mut moves_ok = true;
    for (s_here, s_next, expect) in [(0.4, 0.6, true), (0.6, 0.4, false), (0.5, 0.5, false)] {
        for boundary_cat in [5usize, 2] {
            let grp = if boundary_cat == 5 { 0 } else { 1 };
            let mut pilot = Rigged([((boundary_cat, grp), s_here), ((boundary_cat, grp + 1), s_next)].into());
            let r = build_routing(&d, 3, Some(&mut pilot), "rigged", 0).unwrap();
            let moved: Vec<_> = r.provenance.refinement_log.iter().filter(|s| s.moved).collect();
            let expected_moves = usize::from(expect);
            moves_ok &= moved.len() == expected_moves;
            moves_ok &= (r.gamma[boundary_cat] == grp + 1) == expect;
            moves_ok &= moved.iter().all(|s| s.category == boundary_cat && s.s_g_plus_1 > s.s_g);
        }
    }
    ok &= moves_ok;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shift_ok = true;
    for _ in 0..200 {
        let k = rng.random_range(2..10);
        let g = rng.random_range(1..=k);
        let base: Vec<f64> = (0..k).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let shift = rng.random_range(-4..=4) as f64 * 0.25;
        let d0 = DifficultyTable::from_difficulty(base.clone());
        let d1 = DifficultyTable::from_difficulty(base.iter().map(|x| x + shift).collect());
        let scores: BTreeMap<(usize, usize), f64> =
            (0..k).flat_map(|c| (0..g).map(move |h| ((c, h), ((c * 7 + h * 3) % 5) as f64))).collect();
        let a = build_routing(&d0, g, Some(&mut Rigged(scores.clone())), "r", 0).unwrap();
        let b = build_routing(&d1, g, Some(&mut Rigged(scores)), "r", 0).unwrap();
        shift_ok &= a.gamma == b.gamma && a.alpha == b.alpha;
    }
    ok &= shift_ok;
    verdict(4, "grouping algorithm", ok, format!("G=3 sizes {s3:?}, G=4 sizes {s4:?}, rigged moves ok {moves_ok}, shift invariant {shift_ok}"));
}

fn small_dataset(k: usize, n: usize, train: usize, test: usize, seed: u64) -> Dataset {
    let mut dc = DataConfig::new(k, n, seed, Heterogeneity::Graded);
    dc.train_per_category = train;
    dc.test_per_category = test;
    generate_dataset(&dc).unwrap()
}

fn tiny_train_config(epochs: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(16, RoutingSource::None, seed);
    cfg.model = ModelShape::tiny();
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.lr.cycle = 16;
    cfg
}

#[test]
fn criterion_5_routing_isolation() {
    let start = Instant::now();
    let ds = small_dataset(4, 16, 12, 1, 21);
    let cfg = tiny_train_config(2, 3);
    let routing = RoutingTable {
        gamma: vec![0, 1, 1, 2],
        alpha: vec![Capacity::H, Capacity::L, Capacity::H],
        provenance: Provenance::default(),
    };
    let (mut steps, mut violations, mut per_group) = (0usize, 0usize, [0usize; 3]);
    let observer = |s: &StepInfo| {
        steps += 1;
        per_group[s.group] += 1;
        for (id, p) in s.model.store.iter() {
            if matches!(p.block, Block::Phi(g) if g != s.group) {
                let clean = !s.grads.reached(id)
                    && s.grads.get(id).data().iter().all(|&x| x == 0.0)
                    && s.deltas[id.0] == StepDelta::default();
                violations += usize::from(!clean);
            }
        }
        Ok(())
    };
    train(&cfg, 4, ds.split("train").unwrap(), &routing, TrainOptions { observer: Some(Box::new(observer)), ..Default::default() })
        .unwrap();
    let elapsed = start.elapsed();
    verdict(
        5,
        "routing isolation",
        violations == 0 && steps == 24 && per_group.iter().all(|&n| n > 0) && within(elapsed, 120.0),
        format!("{steps} steps, per group {per_group:?}, {violations} inactive tensors touched, {elapsed:.2?}"),
    );
}

struct Campaign {
    results: Result<Vec<SeedResult>, String>,
    elapsed: Duration,
}

fn campaign() -> &'static Campaign {
    static CAMPAIGN: OnceLock<Campaign> = OnceLock::new();
    CAMPAIGN.get_or_init(|| {
        let start = Instant::now();
        let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_campaign");
        let _ = std::fs::remove_dir_all(&work);
        let results = generate_dataset(&desk_data_config(2024))
            .and_then(|data| run_campaign(&CampaignConfig::desk(&work), &data))
            .map_err(|e| e.to_string());
        if let Ok(rs) = &results {
            for r in rs {
                let _ = writeln!(
                    std::io::stdout().lock(),
                    "campaign seed {}: baseline {:.4}, decomposed {:.4}, random {:.4}; psi mu {:?} -> {:?}, nbar {:?} -> {:?}",
                    r.seed,
                    r.baseline.eval.mean_rate(),
                    r.decomposed.eval.mean_rate(),
                    r.random.eval.mean_rate(),
                    r.baseline.contention["psi"].mu_cc,
                    r.decomposed.contention["psi"].mu_cc,
                    r.baseline.contention["psi"].nbar,
                    r.decomposed.contention["psi"].nbar,
                );
            }
        }
        Campaign { results, elapsed: start.elapsed() }
    })
}

fn campaign_results(n: usize, name: &str) -> &'static [SeedResult] {
    match &campaign().results {
        Ok(r) => r,
        Err(e) => {
            verdict(n, name, false, format!("campaign failed: {e}"));
            unreachable!()
        }
    }
}

#[test]
fn criterion_6_contention_concentrates_in_correspondence() {
    let rs = campaign_results(6, "contention concentrates in phi");
    let per_seed: Vec<bool> = rs.iter().map(|r| r.phi_most_contended().unwrap_or(false)).collect();
    let hits = per_seed.iter().filter(|&&b| b).count();
    let detail: Vec<String> = rs
        .iter()
        .map(|r| {
            let c = &r.baseline.contention;
            format!(
                "seed {}: mu psi/phi/omega {:.3}/{:.3}/{:.3} nbar {:.3}/{:.3}/{:.3} r {:.3}/{:.3}/{:.3}",
                r.seed,
                c["psi"].mu_cc.unwrap_or(f64::NAN),
                c["phi"].mu_cc.unwrap_or(f64::NAN),
                c["omega"].mu_cc.unwrap_or(f64::NAN),
                c["psi"].nbar.unwrap_or(f64::NAN),
                c["phi"].nbar.unwrap_or(f64::NAN),
                c["omega"].nbar.unwrap_or(f64::NAN),
                c["psi"].r_theta.unwrap_or(f64::NAN),
                c["phi"].r_theta.unwrap_or(f64::NAN),
                c["omega"].r_theta.unwrap_or(f64::NAN),
            )
        })
        .collect();
    verdict(
        6,
        "contention concentrates in phi",
        hits >= 4,
        format!("{hits}/{} seeds; {}; campaign {:.0?}", rs.len(), detail.join("; "), campaign().elapsed),
    );
}

#[test]
fn criterion_7_decomposition_relieves_backbone() {
    let rs = campaign_results(7, "decomposition relieves the backbone");
    let hits = rs.iter().filter(|r| r.backbone_relieved().unwrap_or(false)).count();
    let detail: Vec<String> = rs
        .iter()
        .map(|r| {
            let (b, d) = (&r.baseline.contention["psi"], &r.decomposed.contention["psi"]);
            format!(
                "seed {}: mu {:.3} -> {:.3}, nbar {:.3} -> {:.3}",
                r.seed,
                b.mu_cc.unwrap_or(f64::NAN),
                d.mu_cc.unwrap_or(f64::NAN),
                b.nbar.unwrap_or(f64::NAN),
                d.nbar.unwrap_or(f64::NAN)
            )
        })
        .collect();
    verdict(7, "decomposition relieves the backbone", hits >= 4, format!("{hits}/{} pairs; {}", rs.len(), detail.join("; ")));
}

#[test]
fn criterion_8_difficulty_grouping_ranks_first() {
    let rs = campaign_results(8, "difficulty-aware >= random >= none");
    let mean = |f: fn(&SeedResult) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
    let aware = mean(|r| r.decomposed.eval.mean_rate());
    let random = mean(|r| r.random.eval.mean_rate());
    let none = mean(|r| r.baseline.eval.mean_rate());
    verdict(
        8,
        "difficulty-aware >= random >= none",
        aware >= random && random >= none && aware - none >= 0.02,
        format!("seed-mean success: difficulty-aware {aware:.4}, random {random:.4}, none {none:.4}"),
    );
}

#[test]
fn criterion_9_determinism_and_formats() {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        if !pass {
            notes.push(name.to_string());
        }
        ok &= pass;
    };

    let ds = small_dataset(3, 16, 8, 2, 77);
    let bytes = encode_dataset(&ds).unwrap();
    check("dataset regeneration", encode_dataset(&small_dataset(3, 16, 8, 2, 77)).unwrap() == bytes);
    let back = decode_dataset(&bytes).unwrap();
    check("dataset round-trip", back == ds && encode_dataset(&back).unwrap() == bytes);

    let cfg = tiny_train_config(2, 4);
    let routing = RoutingTable { gamma: vec![0, 1, 1], alpha: vec![Capacity::H, Capacity::L], provenance: Provenance::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<TrainOutcome> = dirs
        .iter()
        .map(|d| {
            let opts = TrainOptions { out_dir: Some(d.path().to_path_buf()), ..Default::default() };
            train(&cfg, 3, ds.split("train").unwrap(), &routing, opts).unwrap()
        })
        .collect();
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    check("checkpoints", outs[0].checkpoints.iter().zip(&outs[1].checkpoints).all(|(a, b)| read(a) == read(b)));
    check("metrics", read(&dirs[0].path().join("metrics.csv")) == read(&dirs[1].path().join("metrics.csv")));

    let ck_bytes = read(&outs[0].checkpoints[1]);
    let ck = decode_checkpoint(&ck_bytes).unwrap();
    let same_values = ck.model.store.iter().zip(outs[0].model.store.iter()).all(|((_, a), (_, b))| a.value == b.value);
    let pts = &ds.split("test").unwrap()[0].observed;
    let same_pose = (0..2).all(|g| ck.model.predict(pts, g).unwrap() == outs[0].model.predict(pts, g).unwrap());
    check("checkpoint round-trip", same_values && same_pose && ck.routing == routing);
    check("checkpoint re-encode", encode_checkpoint(&ck.model, &ck.routing, ck.manifest.epoch, &ck.manifest.config_hash).unwrap() == ck_bytes);

    let opts = DiagnoseOptions { batches_per_category: 2, batch_size: 4, ..DiagnoseOptions::default() };
    let diag: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let out = d.path().join("diag");
            diagnose_run(&list_checkpoints(d.path()).unwrap(), ds.split("train").unwrap(), 3, &opts, Some(&out)).unwrap();
            let mut files: Vec<PathBuf> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            files.iter().filter(|p| p.extension().is_some_and(|x| x == "csv")).flat_map(|p| read(p)).collect()
        })
        .collect();
    check("diagnostic CSVs", !diag[0].is_empty() && diag[0] == diag[1]);

    let corrupt = |b: &[u8], f: &dyn Fn(&mut Vec<u8>)| {
        let mut c = b.to_vec();
        f(&mut c);
        c
    };
    let flip = |c: &mut Vec<u8>| {
        let at = c.len() - 20;
        c[at] ^= 0x08;
    };
    let cut = |c: &mut Vec<u8>| c.truncate(c.len() - 5);
    let magic = |c: &mut Vec<u8>| c[0] = b'Z';
    let version = |c: &mut Vec<u8>| c[4] = 7;
    let code = |e: Error| e.exit_code();
    check("dataset checksum", matches!(decode_dataset(&corrupt(&bytes, &flip)), Err(Error::Checksum { .. })));
    check("dataset truncation", matches!(decode_dataset(&corrupt(&bytes, &cut)), Err(Error::Truncated { .. })));
    check("dataset magic", matches!(decode_dataset(&corrupt(&bytes, &magic)), Err(Error::BadMagic { .. })));
    check("dataset version", matches!(decode_dataset(&corrupt(&bytes, &version)), Err(Error::BadVersion { .. })));
    check("checkpoint checksum", matches!(decode_checkpoint(&corrupt(&ck_bytes, &flip)), Err(Error::Checksum { .. })));
    check("checkpoint truncation", matches!(decode_checkpoint(&corrupt(&ck_bytes, &cut)), Err(Error::Truncated { .. })));
    check("checkpoint magic", matches!(decode_checkpoint(&corrupt(&ck_bytes, &magic)), Err(Error::BadMagic { .. })));
    check("checkpoint version", matches!(decode_checkpoint(&corrupt(&ck_bytes, &version)), Err(Error::BadVersion { .. })));
    check("exit code 3", code(decode_checkpoint(&corrupt(&ck_bytes, &flip)).unwrap_err()) == 3);
    let elapsed = start.elapsed();
    check("runtime", within(elapsed, 300.0));
    verdict(
        9,
        "determinism and formats",
        ok,
        if notes.is_empty() { format!("all checks hold, {elapsed:.2?}") } else { format!("failed: {notes:?}, {elapsed:.2?}") },
    );
}
