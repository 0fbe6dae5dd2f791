//! Acceptance suite: one test — and one pass/fail line — per criterion.
//!
//! Criteria 4, 6, 7, 8, and 9 share a single toy benchmark pipeline run
//! (plus an identical second run for the determinism check), built lazily
//! on first use.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use pharos_cli::config::ExperimentConfig;
use pharos_cli::pipeline::{self, TimingRecord, MODEL_ADV_FILE, MODEL_FILE};
use pharos_core::attack::{bit_alignment, loss_pga_dagger, AttackMethod};
use pharos_core::hashcore::HashCode;
use pharos_core::model::HashNet;
use pharos_core::retrieval::{average_precision, map_at_n, rank, Index};
use pharos_core::semantics::{
    pgm_pharos, pharos_bruteforce, psi_objective, LabelVector, WeightScheme, WeightedPool,
};

/// Frozen calibration value for the toy recipe's clean MAP (measured
/// 0.913075 at the frozen recipe; pinned with a safety margin).
const PINNED_CLEAN_MAP: f64 = 0.90;

/// The frozen toy benchmark recipe: dataset defaults (C=8, D=64,
/// 2000/8000/500, seed 42), K=32, T=100, ε=8/255, with the calibrated
/// training schedule.
fn toy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.hidden = vec![128, 64];
    cfg.model.train.epochs = 150;
    cfg.model.train.learning_rate = 0.02;
    cfg.model.train.quant_weight = 0.01;
    cfg.adv.epochs = Some(60);
    cfg.validate().unwrap();
    cfg
}

struct Artifacts {
    _guard: TempDir,
    dir_a: PathBuf,
    dir_b: PathBuf,
    cfg: ExperimentConfig,
    /// Evaluation tag → MAP, from run A.
    maps: BTreeMap<String, f64>,
    /// Method tag → (max L∞, min coordinate, max coordinate) over all
    /// attacked queries, from run A.
    adv_summaries: BTreeMap<String, (f64, f64, f64)>,
    /// Wall time of one full pipeline run (superset of the criterion-6
    /// recipe: adds two extra methods and adversarial training).
    run_seconds: f64,
}

fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
) -> (BTreeMap<String, f64>, BTreeMap<String, (f64, f64, f64)>) {
    let mut maps = BTreeMap::new();
    let mut adv = BTreeMap::new();
    pipeline::cmd_gen_data(cfg, out).unwrap();
    pipeline::cmd_train(cfg, out).unwrap();
    maps.insert(
        "clean".to_string(),
        pipeline::cmd_eval(cfg, out, MODEL_FILE, "clean", "clean").unwrap().map,
    );
    for method in [
        AttackMethod::Pga,
        AttackMethod::PgaDagger,
        AttackMethod::PgaWeighted,
        AttackMethod::Hag,
        AttackMethod::AnchorTargeted,
    ] {
        let mut c = cfg.clone();
        c.attack.method = method;
        let tag = method.tag();
        let results = pipeline::cmd_attack(&c, out, MODEL_FILE, tag).unwrap();
        let max_linf = results.iter().map(|r| r.linf).fold(0.0, f64::max);
        let min_x = results
            .iter()
            .flat_map(|r| r.x_adv.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let max_x = results
            .iter()
            .flat_map(|r| r.x_adv.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        adv.insert(tag.to_string(), (max_linf, min_x, max_x));
        maps.insert(
            tag.to_string(),
            pipeline::cmd_eval(&c, out, MODEL_FILE, tag, tag).unwrap().map,
        );
    }
    pipeline::cmd_advtrain(cfg, out).unwrap();
    let mut c = cfg.clone();
    c.attack.method = AttackMethod::Pga;
    pipeline::cmd_attack(&c, out, MODEL_ADV_FILE, "pga-adv").unwrap();
    maps.insert(
        "clean-adv".to_string(),
        pipeline::cmd_eval(cfg, out, MODEL_ADV_FILE, "clean", "clean-adv").unwrap().map,
    );
    maps.insert(
        "pga-adv".to_string(),
        pipeline::cmd_eval(&c, out, MODEL_ADV_FILE, "pga-adv", "pga-adv").unwrap().map,
    );
    pipeline::cmd_report(out).unwrap();
    (maps, adv)
}

fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let guard = TempDir::new().unwrap();
        let dir_a = guard.path().join("run_a");
        let dir_b = guard.path().join("run_b");
        let cfg = toy_config();
        let started = Instant::now();
        let (maps, adv_summaries) = run_pipeline(&cfg, &dir_a);
        let run_seconds = started.elapsed().as_secs_f64();
        run_pipeline(&cfg, &dir_b);
        Artifacts {
            _guard: guard,
            dir_a,
            dir_b,
            cfg,
            maps,
            adv_summaries,
            run_seconds,
        }
    })
}

fn random_code(rng: &mut ChaCha8Rng, k: usize) -> HashCode {
    let signs: Vec<i8> = (0..k).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
    HashCode::from_signs(&signs).unwrap()
}

#[test]
fn criterion_1_theorem_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut exact_checked = 0u32;
    for k in [4usize, 8, 12] {
        for _ in 0..1000 {
            let n_pos = rng.gen_range(1..=10);
            let n_neg = rng.gen_range(0..=10usize);
            let codes: Vec<HashCode> =
                (0..n_pos + n_neg).map(|_| random_code(&mut rng, k)).collect();
            let positives: Vec<(usize, f64)> =
                (0..n_pos).map(|i| (i, rng.gen::<f64>())).collect();
            let negatives: Vec<(usize, f64)> =
                (n_pos..n_pos + n_neg).map(|j| (j, rng.gen::<f64>())).collect();
            let pool = WeightedPool::new(&codes, positives, negatives).unwrap();
            let pharos = pgm_pharos(&pool, WeightScheme::Uniform).unwrap();
            let best = pharos_bruteforce(&pool).unwrap();
            let psi_pgm: f64 = psi_objective(&pharos.code, &pool).unwrap();
            let psi_best: f64 = psi_objective(&best, &pool).unwrap();
            assert!(
                (psi_pgm - psi_best).abs() <= 1e-9,
                "K={k}: ψ(pgm)={psi_pgm} exceeds exhaustive minimum {psi_best}"
            );
            if pharos.tie_count == 0 {
                assert_eq!(pharos.code, best, "K={k}: unique argmin must equal PGM");
                exact_checked += 1;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "theorem oracle took {elapsed:.1}s (limit 60s)");
    println!(
        "[criterion 1] PASS — 3000 instances, ψ within 1e-9, \
         {exact_checked} tie-free exact matches, {elapsed:.1}s"
    );
}

#[test]
fn criterion_2_hamming_identities() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    for k in [16usize, 32, 64] {
        for _ in 0..100_000 {
            let a = random_code(&mut rng, k);
            let b = random_code(&mut rng, k);
            let h = a.hamming(&b).unwrap();
            assert_eq!(2 * h as i64 + a.inner(&b).unwrap(), k as i64);
            assert_eq!(a.negate().hamming(&b).unwrap() as usize, k - h as usize);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "hamming identities took {elapsed:.2}s (limit 5s)");
    println!("[criterion 2] PASS — 3×100000 pairs, integer-exact, {elapsed:.2}s");
}

#[derive(Clone, Copy)]
enum Variant {
    Dagger,
    Weighted,
    Masked,
}

/// The loss with ω and m frozen at a base point, matching their role as
/// per-step constants in the update rule.
fn loss_frozen(variant: Variant, h_base: &[f64], h: &[f64], pharos: &HashCode, t: f64) -> f64 {
    let k = h.len();
    let u_base = bit_alignment(h_base, pharos).unwrap();
    let u = bit_alignment(h, pharos).unwrap();
    match variant {
        Variant::Dagger => loss_pga_dagger(h, pharos).unwrap(),
        Variant::Weighted => {
            let dot: f64 = (0..k)
                .map(|i| {
                    let w = if u_base[i] > t { u_base[i] - 2.0 * t } else { -t * t };
                    w * u[i]
                })
                .sum();
            -dot / k as f64
        }
        Variant::Masked => {
            let pi = u_base.iter().filter(|&&uk| uk > t).count();
            if pi == 0 {
                return 0.0;
            }
            let dot: f64 = (0..k)
                .filter(|&i| u_base[i] > t)
                .map(|i| (u_base[i] - 2.0 * t) * u[i])
                .sum();
            -dot / pi as f64
        }
    }
}

/// Upstream dL/dh with ω and m treated as per-step constants.
fn upstream(variant: Variant, h: &[f64], pharos: &HashCode, t: f64) -> Vec<f64> {
    let k = h.len();
    let u = bit_alignment(h, pharos).unwrap();
    match variant {
        Variant::Dagger => (0..k).map(|i| -(pharos.sign(i) as f64) / k as f64).collect(),
        Variant::Weighted => (0..k)
            .map(|i| {
                let w = if u[i] > t { u[i] - 2.0 * t } else { -t * t };
                -w * pharos.sign(i) as f64 / k as f64
            })
            .collect(),
        Variant::Masked => {
            let pi = u.iter().filter(|&&uk| uk > t).count();
            if pi == 0 {
                return vec![0.0; k];
            }
            (0..k)
                .map(|i| {
                    if u[i] > t {
                        -(u[i] - 2.0 * t) * pharos.sign(i) as f64 / pi as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

#[test]
fn criterion_3_gradient_correctness() {
    const FD_STEP: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let t = -0.8;
    let mut checked = 0u32;
    let mut masked_zero_checked = 0u32;
    let mut trial = 0u64;
    while checked < 60 {
        trial += 1;
        let d = rng.gen_range(4..=10);
        let k = rng.gen_range(3..=8);
        let net =
            HashNet::<f64>::new_random(d, &[rng.gen_range(4..=12)], k, 3000 + trial).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
        let pharos = random_code(&mut rng, k);
        let variant = match checked % 3 {
            0 => Variant::Dagger,
            1 => Variant::Weighted,
            _ => Variant::Masked,
        };
        let h = net.forward(&x).unwrap();
        let u = bit_alignment(&h, &pharos).unwrap();
        // sample away from the u_k = t branch boundary
        if u.iter().any(|&uk| (uk - t).abs() <= 1e-2) {
            continue;
        }
        let up = upstream(variant, &h, &pharos, t);
        if let Variant::Masked = variant {
            for i in 0..k {
                if u[i] <= t {
                    assert_eq!(up[i], 0.0, "masked coordinate {i} must have zero partial");
                    masked_zero_checked += 1;
                }
            }
        }
        let analytic = net.input_gradient(&x, &up).unwrap();
        for dcoord in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[dcoord] += FD_STEP;
            xm[dcoord] -= FD_STEP;
            let lp = loss_frozen(variant, &h, &net.forward(&xp).unwrap(), &pharos, t);
            let lm = loss_frozen(variant, &h, &net.forward(&xm).unwrap(), &pharos, t);
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let denom = fd.abs().max(1e-8);
            assert!(
                (analytic[dcoord] - fd).abs() / denom <= REL_TOL,
                "trial {trial} coord {dcoord}: analytic {} vs fd {fd}",
                analytic[dcoord]
            );
        }
        checked += 1;
    }
    println!(
        "[criterion 3] PASS — {checked} FD cases within 1e-4, \
         {masked_zero_checked} masked coordinates with zero partials"
    );
}

#[test]
fn criterion_4_constraint_satisfaction() {
    let art = artifacts();
    let eps: f64 = art.cfg.attack.epsilon.value();
    for (tag, &(max_linf, min_x, max_x)) in &art.adv_summaries {
        assert!(
            max_linf <= eps + 1e-9,
            "{tag}: max L∞ {max_linf} exceeds ε {eps}"
        );
        assert!((0.0..=1.0).contains(&min_x), "{tag}: coordinate {min_x} < 0");
        assert!((0.0..=1.0).contains(&max_x), "{tag}: coordinate {max_x} > 1");
    }
    assert_eq!(art.adv_summaries.len(), 5, "all five methods must be covered");
    println!(
        "[criterion 4] PASS — 5 methods × 500 queries inside the ε-ball \
         (ε = {eps:.6}) and [0,1]^D"
    );
}

#[test]
fn criterion_5_metric_oracles() {
    assert!((average_precision(&[1, 1, 1]) - 1.0).abs() <= 1e-9);
    assert!(average_precision(&[0, 0, 0]).abs() <= 1e-9);
    assert!((average_precision(&[1, 0, 1]) - 0.8333333333333333).abs() <= 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    for trial in 0..100 {
        let n = rng.gen_range(1..=500);
        let k = [8usize, 16, 32][trial % 3];
        let codes: Vec<HashCode> = (0..n).map(|_| random_code(&mut rng, k)).collect();
        let labels: Vec<LabelVector> = (0..n)
            .map(|_| LabelVector::new(vec![1]).unwrap())
            .collect();
        let index = Index::build(codes.clone(), labels).unwrap();
        let query = random_code(&mut rng, k);
        let topn = rng.gen_range(1..=n + 5);
        let got = rank(&query, &index, topn).unwrap();
        let mut expected: Vec<(u32, usize)> = codes
            .iter()
            .enumerate()
            .map(|(id, c)| (query.hamming(c).unwrap(), id))
            .collect();
        expected.sort();
        expected.truncate(topn);
        let expected: Vec<usize> = expected.into_iter().map(|(_, id)| id).collect();
        assert_eq!(got, expected, "trial {trial}: rank deviates from sort oracle");
    }
    println!("[criterion 5] PASS — AP fixtures exact, 100 rank-oracle instances");
}

#[test]
fn criterion_6_toy_attack_ordering() {
    let art = artifacts();
    let clean = art.maps["clean"];
    let pga = art.maps["pga"];
    let dagger = art.maps["pga-dagger"];
    let hag = art.maps["hag"];
    assert!(
        clean >= PINNED_CLEAN_MAP,
        "clean MAP {clean:.6} below pinned {PINNED_CLEAN_MAP}"
    );
    assert!(
        pga <= 0.5 * clean,
        "MAP(PgA) {pga:.6} above half of clean {clean:.6}"
    );
    assert!(pga <= hag, "MAP(PgA) {pga:.6} above MAP(HAG) {hag:.6}");
    assert!(
        pga <= dagger + 0.02,
        "MAP(PgA) {pga:.6} above MAP(PgA†) {dagger:.6} + 0.02"
    );
    assert!(
        art.run_seconds < 600.0,
        "pipeline took {:.0}s (limit 600s)",
        art.run_seconds
    );
    println!(
        "[criterion 6] PASS — clean {clean:.4} ≥ {PINNED_CLEAN_MAP}, \
         PgA {pga:.4} ≤ half of clean, ≤ HAG {hag:.4}, ≤ PgA† {dagger:.4}+0.02, \
         run {:.0}s < 600s",
        art.run_seconds
    );
}

#[test]
fn criterion_7_adversarial_training_direction() {
    let art = artifacts();
    let clean = art.maps["clean"];
    let clean_adv = art.maps["clean-adv"];
    let pga = art.maps["pga"];
    let pga_adv = art.maps["pga-adv"];
    assert!(
        pga_adv > pga,
        "defended MAP under PgA {pga_adv:.6} not above undefended {pga:.6}"
    );
    let drop = (clean - clean_adv) / clean;
    assert!(
        drop < 0.25,
        "defended clean MAP dropped {:.1}% (limit 25%)",
        drop * 100.0
    );
    println!(
        "[criterion 7] PASS — PgA MAP {pga:.4} → {pga_adv:.4} after defense, \
         clean drop {:.1}% < 25%",
        drop * 100.0
    );
}

#[test]
fn criterion_8_efficiency() {
    let art = artifacts();
    let text = fs::read_to_string(art.dir_a.join(pipeline::timing_file("pga"))).unwrap();
    let timing: TimingRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(timing.queries, 500);
    assert!(
        timing.precompute_share < 0.01,
        "pharos precomputation {:.3}% of PgA wall time (limit 1%)",
        timing.precompute_share * 100.0
    );

    // ranking throughput: 500 × 8000 at K = 64 on one worker
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let db: Vec<HashCode> = (0..8000).map(|_| random_code(&mut rng, 64)).collect();
    let labels: Vec<LabelVector> =
        (0..8000).map(|_| LabelVector::new(vec![1]).unwrap()).collect();
    let index = Index::build(db, labels).unwrap();
    let queries: Vec<HashCode> = (0..500).map(|_| random_code(&mut rng, 64)).collect();
    let qlabels: Vec<LabelVector> =
        (0..500).map(|_| LabelVector::new(vec![1]).unwrap()).collect();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let report = single
        .install(|| map_at_n(&queries, &qlabels, &index, 5000, "clean", 0))
        .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(report.per_query_ap.len(), 500);
    assert!(elapsed < 1.0, "ranking 500×8000 took {elapsed:.2}s (limit 1s)");
    println!(
        "[criterion 8] PASS — pharos share {:.3}% < 1%, \
         500×8000 ranking {elapsed:.3}s < 1s",
        timing.precompute_share * 100.0
    );
}

#[test]
fn criterion_9_determinism() {
    let art = artifacts();
    let reproducible = |name: &str| !name.starts_with("timing_") && name != "report_timing.csv";
    let names = |dir: &Path| -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| reproducible(n))
            .collect();
        v.sort();
        v
    };
    let names_a = names(&art.dir_a);
    assert_eq!(names_a, names(&art.dir_b), "runs produced different file sets");
    assert!(names_a.iter().any(|n| n.ends_with(".phf")));
    assert!(names_a.iter().filter(|n| n.ends_with(".phm")).count() == 2);
    assert!(names_a.iter().filter(|n| n.ends_with(".pha")).count() == 6);
    assert!(names_a.contains(&"report.json".to_string()));
    let mut compared = 0u32;
    for name in &names_a {
        let a = fs::read(art.dir_a.join(name)).unwrap();
        let b = fs::read(art.dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        compared += 1;
    }
    println!("[criterion 9] PASS — {compared} artifacts byte-identical across two runs");
}
