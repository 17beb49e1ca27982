//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mgsvf::config::ExperimentConfig;
use mgsvf::dct::{dct_forward, dct_inverse};
use mgsvf::embed::EmbeddingModel;
use mgsvf::linalg::Matrix;
use mgsvf::losses::{freq_distill, session_loss, unified_distill, Distillation, FrequencyWeights, LossConfig, TripletConfig};
use mgsvf::metrics::{average_forgetting, profile_from_base, spearman, AccuracyMatrix};
use mgsvf::spaces::{composite_classify, fit_pca_composition, ncm_classify, CenterRegistry, ClassCenter, Composition};
use mgsvf::trainer::{run_experiment_with_base, train_base_for_plan, Mode, ResultRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dct_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut parseval, mut round_trip) = (0.0f64, 0.0f64);
    for dim in [4, 32, 512] {
        for _ in 0..1000 {
            let z = gaussian(&mut rng, dim);
            let spectrum = dct_forward(&z).unwrap();
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = spectrum.coefficients.iter().map(|v| v * v).sum::<f64>().sqrt();
            parseval = parseval.max((nz - nt).abs());
            let back = dct_inverse(&spectrum).unwrap();
            for (a, b) in z.iter().zip(&back) {
                round_trip = round_trip.max((a - b).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        parseval < 1e-9 && round_trip < 1e-9 && secs < 5.0,
        format!("max |‖Tz‖−‖z‖| {parseval:.2e}, max round-trip error {round_trip:.2e}, {secs:.2}s"),
    )
}

/// Largest relative disagreement between analytic and central-difference gradients.
fn max_gradient_error(cfg: &LossConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [32, 64, 64, 32];
    let model = EmbeddingModel::new(&sizes, &mut rng).unwrap();
    let mut prev = model.clone();
    let p: Vec<f64> = model.flat_params().iter().map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    prev.set_flat_params(&p).unwrap();
    let xs: Vec<Vec<f64>> = (0..6).map(|_| gaussian(&mut rng, 32)).collect();
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let labels = [0, 0, 1, 1, 2, 2];

    let analytic = session_loss(&inputs, &labels, &model, Some(&prev), cfg).unwrap().grads.flat();
    let theta = model.flat_params();
    let h = 1e-6;
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut m = model.clone();
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            m.set_flat_params(&t).unwrap();
            let up = session_loss(&inputs, &labels, &m, Some(&prev), cfg).unwrap().total;
            t[i] = theta[i] - h;
            m.set_flat_params(&t).unwrap();
            let down = session_loss(&inputs, &labels, &m, Some(&prev), cfg).unwrap().total;
            let numeric = (up - down) / (2.0 * h);
            (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6)
        })
        .reduce(|| 0.0, f64::max)
}

fn gradient_soundness() -> Outcome {
    let started = Instant::now();
    let unified = LossConfig {
        lambda: 1.0,
        triplet: TripletConfig { margin: 0.5 },
        distillation: Distillation::Unified,
    };
    let frequency = LossConfig {
        distillation: Distillation::Frequency(FrequencyWeights::new(vec![1.0, 0.5, 0.0, 2.0, 0.25, 1.0, 0.0, 0.75]).unwrap()),
        ..unified.clone()
    };
    let e_unified = max_gradient_error(&unified, 2);
    let e_frequency = max_gradient_error(&frequency, 3);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        e_unified < 1e-4 && e_frequency < 1e-4 && secs < 30.0,
        format!("max relative error unified {e_unified:.2e}, frequency {e_frequency:.2e}, {secs:.2}s"),
    )
}

fn random_registry(rng: &mut ChaCha8Rng, classes: usize, half: usize) -> CenterRegistry {
    let mut reg = CenterRegistry::new();
    for c in 0..classes {
        reg.insert(
            c,
            ClassCenter {
                u_slow: gaussian(rng, half),
                u_fast: gaussian(rng, half),
                introduced_at: 1,
            },
        )
        .unwrap();
    }
    reg
}

fn equivalence_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = FrequencyWeights::new(vec![1.0]).unwrap();
    let mut distill_gap = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=64);
        let (a, b) = (gaussian(&mut rng, dim), gaussian(&mut rng, dim));
        let (lu, gu) = unified_distill(&a, &b).unwrap();
        let (lf, gf) = freq_distill(&a, &b, &one).unwrap();
        distill_gap = distill_gap.max((lu - lf).abs());
        for (x, y) in gu.iter().zip(&gf) {
            distill_gap = distill_gap.max((x - y).abs());
        }
    }

    let mut identity_mismatch = 0;
    for _ in 0..1000 {
        let half = rng.random_range(1..=8);
        let classes = rng.random_range(1..=6);
        let reg = random_registry(&mut rng, classes, half);
        let z = gaussian(&mut rng, 2 * half);
        let concat: BTreeMap<usize, Vec<f64>> = reg.iter().map(|(c, u)| (c, u.composite())).collect();
        let want = ncm_classify(&z, &concat).unwrap();
        if composite_classify(&z, &reg, &Composition::identity(2 * half)).unwrap() != want {
            identity_mismatch += 1;
        }
    }

    let mut pca_mismatch = 0;
    for _ in 0..1000 {
        let half = rng.random_range(1..=8);
        let pool: Vec<Vec<f64>> = (0..3 * half + 2).map(|_| gaussian(&mut rng, half)).collect();
        let pca = fit_pca_composition(&pool, half).unwrap();
        let classes = rng.random_range(1..=6);
        let reg = random_registry(&mut rng, classes, half);
        let z = gaussian(&mut rng, 2 * half);
        if composite_classify(&z, &reg, &pca).unwrap()
            != composite_classify(&z, &reg, &Composition::identity(2 * half)).unwrap()
        {
            pca_mismatch += 1;
        }
    }
    outcome(
        distill_gap < 1e-9 && identity_mismatch == 0 && pca_mismatch == 0,
        format!(
            "(a) max gap {distill_gap:.2e}; (b) {identity_mismatch}/1000 mismatches; (c) {pca_mismatch}/1000 mismatches"
        ),
    )
}

/// Dense metric matrix for a composition, built independently of the library.
fn dense_metric(comp: &Composition, half: usize) -> Vec<Vec<f64>> {
    let n = 2 * half;
    let mut a = vec![vec![0.0; n]; n];
    match comp {
        Composition::Simple { a: w } => {
            for (i, row) in a.iter_mut().enumerate() {
                row[i] = if i < half { 1.0 - w } else { *w };
            }
        }
        Composition::Pca { projection } => {
            // Q = blockdiag(P, P); A = QᵀQ
            let r = projection.rows();
            let mut q = vec![vec![0.0; n]; 2 * r];
            for i in 0..r {
                for j in 0..half {
                    q[i][j] = projection[(i, j)];
                    q[r + i][half + j] = projection[(i, j)];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    a[i][j] = (0..2 * r).map(|k| q[k][i] * q[k][j]).sum();
                }
            }
        }
        Composition::Metric(m) => {
            for (i, row) in a.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = m[(i, j)];
                }
            }
        }
    }
    a
}

fn brute_force_argmin(z: &[f64], centers: &[(usize, Vec<f64>)], a: &[Vec<f64>]) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (c, u) in centers {
        let d: Vec<f64> = z.iter().zip(u).map(|(x, y)| x - y).collect();
        let mut q = 0.0;
        for i in 0..d.len() {
            for j in 0..d.len() {
                q += d[i] * a[i][j] * d[j];
            }
        }
        if q < best.1 {
            best = (*c, q);
        }
    }
    best.0
}

fn brute_force_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ncm_bad, mut comp_bad) = (0, 0);
    for i in 0..500 {
        let classes = rng.random_range(1..=5);
        // plain NCM on up to 8 dimensions
        let dim = rng.random_range(1..=8);
        let centers: Vec<(usize, Vec<f64>)> = (0..classes).map(|c| (c * 3 + 1, gaussian(&mut rng, dim))).collect();
        let z = gaussian(&mut rng, dim);
        let eye: Vec<Vec<f64>> = (0..dim).map(|r| (0..dim).map(|c| f64::from(u8::from(r == c))).collect()).collect();
        let map: BTreeMap<usize, Vec<f64>> = centers.iter().cloned().collect();
        if ncm_classify(&z, &map).unwrap() != brute_force_argmin(&z, &centers, &eye) {
            ncm_bad += 1;
        }

        // composite space: composite length ≤ 8
        let half = rng.random_range(1..=4);
        let reg = random_registry(&mut rng, classes, half);
        let comp = match i % 3 {
            0 => Composition::Simple {
                a: rng.random_range(0.0..=1.0),
            },
            1 => {
                let pool: Vec<Vec<f64>> = (0..10).map(|_| gaussian(&mut rng, half)).collect();
                fit_pca_composition(&pool, rng.random_range(1..=half)).unwrap()
            }
            _ => {
                let b: Vec<Vec<f64>> = (0..2 * half).map(|_| gaussian(&mut rng, 2 * half)).collect();
                let mut m = Matrix::zeros(2 * half, 2 * half);
                for r in 0..2 * half {
                    for c in 0..2 * half {
                        m[(r, c)] = (0..2 * half).map(|k| b[k][r] * b[k][c]).sum();
                    }
                }
                Composition::Metric(m)
            }
        };
        let z = gaussian(&mut rng, 2 * half);
        let centers: Vec<(usize, Vec<f64>)> = reg.iter().map(|(c, u)| (c, u.composite())).collect();
        if composite_classify(&z, &reg, &comp).unwrap() != brute_force_argmin(&z, &centers, &dense_metric(&comp, half)) {
            comp_bad += 1;
        }
    }
    outcome(
        ncm_bad == 0 && comp_bad == 0,
        format!("ncm {ncm_bad}/500 disagreements, composite {comp_bad}/500 disagreements"),
    )
}

fn forgetting_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(2..=10);
        let rows: Vec<Vec<f64>> = (1..=t).map(|k| (0..k).map(|_| rng.random_range(0.0..=1.0)).collect()).collect();
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        for k in 2..=t {
            let mut total = 0.0;
            for j in 1..k {
                let mut best = f64::NEG_INFINITY;
                for l in j..k {
                    best = best.max(rows[l - 1][j - 1]);
                }
                total += best - rows[k - 1][j - 1];
            }
            let oracle = total / (k - 1) as f64;
            worst = worst.max((average_forgetting(&m, k).unwrap() - oracle).abs());
        }
    }
    outcome(worst < 1e-12, format!("max deviation {worst:.2e} over 200 matrices"))
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
}

struct SeedRun {
    mgsvf: ResultRecord,
    unified: ResultRecord,
    profile: Vec<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Runs 6–9 on the shipped benchmark config; each seed trains its base model once.
fn benchmark() -> Vec<(&'static str, Outcome)> {
    let started = Instant::now();
    let cfg = ExperimentConfig::load(&shipped_config()).unwrap();
    let dataset = cfg.load_dataset().unwrap();
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let plan = cfg.plan_for(&dataset, seed).unwrap();
            let settings = cfg.settings_for(seed);
            let base = train_base_for_plan(&dataset, &plan, &settings.train).unwrap();
            let mut unified_settings = settings.clone();
            unified_settings.train.mode = Mode::Unified;
            let mgsvf = run_experiment_with_base(&dataset, &plan, &settings, &base, &mut |_| {}).unwrap();
            let unified = run_experiment_with_base(&dataset, &plan, &unified_settings, &base, &mut |_| {}).unwrap();
            let profile = profile_from_base(&dataset, &plan, &settings, 4, &base).unwrap();
            SeedRun { mgsvf, unified, profile }
        })
        .collect();
    let secs = started.elapsed().as_secs_f64();
    let mut out = Vec::new();

    let acc_m = mean(runs.iter().map(|r| r.mgsvf.average_accuracy));
    let acc_u = mean(runs.iter().map(|r| r.unified.average_accuracy));
    let gap = mean(runs.iter().map(|r| r.mgsvf.average_accuracy - r.unified.average_accuracy));
    let f_m = mean(runs.iter().map(|r| r.mgsvf.final_forgetting.unwrap()));
    let f_u = mean(runs.iter().map(|r| r.unified.final_forgetting.unwrap()));
    let sessions = runs[0].mgsvf.per_session_accuracy.len();
    out.push((
        "6 desk-scale benchmark",
        outcome(
            gap > 0.0 && acc_m > acc_u && f_m < f_u && secs < 300.0 && sessions == 5 && runs.len() == 5,
            format!(
                "average accuracy mgsvf {acc_m:.4} vs unified {acc_u:.4} (gap {gap:+.4}); \
                 final forgetting {f_m:.4} vs {f_u:.4}; {} seeds, {sessions} sessions, {secs:.1}s",
                runs.len()
            ),
        ),
    ));

    let index = [1.0, 2.0, 3.0, 4.0];
    let rhos: Vec<f64> = runs.iter().map(|r| spearman(&index, &r.profile).unwrap()).collect();
    let rho = mean(rhos.iter().copied());
    let profile: Vec<f64> = (0..4).map(|g| mean(runs.iter().map(|r| r.profile[g]))).collect();
    out.push((
        "7 frequency trend",
        outcome(
            rho > 0.0,
            format!("seed-mean spearman {rho:+.3}; per seed {}; mean forgetting per group {}", fmt(&rhos), fmt(&profile)),
        ),
    ));

    let lineage = |k: usize, fast: bool| {
        mean(runs.iter().map(|r| {
            let l = r.mgsvf.lineage_current_task.as_ref().unwrap();
            if fast {
                l.fast[k]
            } else {
                l.slow[k]
            }
        }))
    };
    let slow: Vec<f64> = (1..sessions).map(|k| lineage(k, false)).collect();
    let fast: Vec<f64> = (1..sessions).map(|k| lineage(k, true)).collect();
    out.push((
        "8 slow/fast gap",
        outcome(
            slow.iter().zip(&fast).all(|(s, f)| f > s),
            format!("current-task accuracy per incremental session: slow {} fast {}", fmt(&slow), fmt(&fast)),
        ),
    ));

    let sweep_a: Vec<f64> = runs[0].mgsvf.composition_sweep.iter().map(|p| p.a).collect();
    let sweep: Vec<f64> = (0..sweep_a.len())
        .map(|i| mean(runs.iter().map(|r| r.mgsvf.composition_sweep[i].average_accuracy)))
        .collect();
    let interior_best = sweep[1..sweep.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best_a = sweep_a[sweep.iter().position(|&v| v == interior_best.max(sweep[0]).max(sweep[sweep.len() - 1])).unwrap()];
    out.push((
        "9 a-sweep shape",
        outcome(
            sweep_a == [0.0, 0.25, 0.5, 0.75, 1.0] && interior_best > sweep[0] && interior_best > sweep[sweep.len() - 1],
            format!("average accuracy over a={} is {}; peak at a={best_a}", fmt(&sweep_a), fmt(&sweep)),
        ),
    ));
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(shipped_config()).unwrap()).unwrap();
    cfg["seeds"] = serde_json::json!([0]);
    let path = dir.path().join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let mut matrices = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_mgsvf"))
            .args(["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("run failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let text = std::fs::read_to_string(out.join("mgsvf/seed-0/result.json")).unwrap();
        let record: ResultRecord = serde_json::from_str(&text).unwrap();
        let csv = std::fs::read(out.join("mgsvf/seed-0/accuracy_matrix.csv")).unwrap();
        matrices.push((record.accuracy_matrix, csv));
    }
    outcome(
        matrices[0] == matrices[1],
        format!("two `run` invocations, seed 0: {} sessions, matrices identical: {}", matrices[0].0.sessions(), matrices[0] == matrices[1]),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 DCT correctness", dct_correctness()),
        ("2 gradient soundness", gradient_soundness()),
        ("3 equivalence reductions", equivalence_reductions()),
        ("4 brute-force oracles", brute_force_oracles()),
        ("5 forgetting oracle", forgetting_oracle()),
    ];
    results.extend(benchmark());
    results.push(("10 determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s)",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
