//! Acceptance gate: twelve end-to-end criteria covering exact
//! tomography, the cat-state string law, Born sampling, gradient
//! integrity, the estimator pipeline, trained-model regimes, the
//! analytic metric suite, t-SNE sanity, latent cluster structure, and
//! byte-level determinism. One pass/fail line is printed per criterion
//! (run with `--nocapture` to see them as they complete); the test
//! fails if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use num_complex::Complex64;
use shadowcat_core::analysis::{cluster_scores, extract_latents, tsne, EmbedConfig};
use shadowcat_core::eval::evaluate;
use shadowcat_core::model::{self, Hyperparams, ModelParams, ModelVars};
use shadowcat_core::qsim::{
    born_probability, fidelity, make_ghz, sample_measurement, string_expectation,
    von_neumann_entropy, DensityMatrix, ObservableString, Pauli,
};
use shadowcat_core::rng::Stream;
use shadowcat_core::shadows::{reconstruct_exact, Shadow};
use shadowcat_core::tensor::{check_gradients, Tensor};
use shadowcat_core::train::Checkpoint;

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn report(&mut self, idx: u32, name: &str, pass: bool, detail: &str, elapsed: f64) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {idx:2} [{verdict}] {name}: {detail} ({elapsed:.1}s)");
        if !pass {
            self.failures.push(format!("criterion {idx} ({name}): {detail}"));
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// The exact cat density matrix: 1/2 at the four corner elements. All
/// entries are dyadic rationals, so arithmetic against Pauli matrices
/// (entries 0, +-1, +-i) is exact in floating point.
fn exact_cat_density(n: usize) -> Vec<Complex64> {
    let dim = 1usize << n;
    let mut rho = vec![Complex64::new(0.0, 0.0); dim * dim];
    let half = Complex64::new(0.5, 0.0);
    rho[0] = half;
    rho[dim - 1] = half;
    rho[(dim - 1) * dim] = half;
    rho[dim * dim - 1] = half;
    rho
}

/// Dense Kronecker product of single-qubit Pauli matrices.
fn pauli_string_matrix(s: &[Pauli]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(1.0, 0.0)];
    let mut dim = 1usize;
    for p in s {
        let m = p.matrix();
        let new_dim = dim * 2;
        let mut next = vec![Complex64::new(0.0, 0.0); new_dim * new_dim];
        for r in 0..dim {
            for c in 0..dim {
                let v = out[r * dim + c];
                for i in 0..2 {
                    for j in 0..2 {
                        next[(r * 2 + i) * new_dim + (c * 2 + j)] = v * m[i][j];
                    }
                }
            }
        }
        out = next;
        dim = new_dim;
    }
    out
}

fn criterion_1(gate: &mut Gate) {
    let (worst, elapsed) = timed(|| {
        let mut worst = 0.0f64;
        for n in 1..=4 {
            let cat = make_ghz(n).unwrap();
            let rho = reconstruct_exact(&cat).unwrap();
            let target = DensityMatrix::from_pure(&cat);
            for (a, b) in rho.elements().iter().zip(target.elements()) {
                worst = worst.max((a - b).norm());
            }
        }
        worst
    });
    gate.report(
        1,
        "exact tomography identity",
        worst <= 1e-10 && elapsed < 10.0,
        &format!("max elementwise err {worst:.2e} over N=1..4"),
        elapsed,
    );
}

fn criterion_2(gate: &mut Gate) {
    let ((pass, checked), elapsed) = timed(|| {
        let mut checked = 0u32;
        for n in 2..=5usize {
            let dim = 1usize << n;
            let rho = exact_cat_density(n);
            for mask in 0..(1u32 << n) {
                let s: Vec<Pauli> = (0..n)
                    .map(|i| if mask >> i & 1 == 1 { Pauli::Y } else { Pauli::X })
                    .collect();
                let p = pauli_string_matrix(&s);
                let mut trace = Complex64::new(0.0, 0.0);
                for r in 0..dim {
                    for c in 0..dim {
                        trace += rho[r * dim + c] * p[c * dim + r];
                    }
                }
                let law = string_expectation(n, &s).unwrap();
                // dyadic arithmetic makes both sides exact
                if trace.re != law || trace.im != 0.0 {
                    return (false, checked);
                }
                checked += 1;
            }
        }
        (true, checked)
    });
    gate.report(
        2,
        "cat string law vs matrix trace",
        pass && elapsed < 5.0,
        &format!("{checked} pure-X/Y strings over N=2..5, exact agreement"),
        elapsed,
    );
}

fn criterion_3(gate: &mut Gate) {
    // chi-square critical values at significance 1e-3
    const CRITICAL: [f64; 3] = [10.828, 13.816, 16.266];
    const SAMPLES: usize = 100_000;
    let ((pass, worst), elapsed) = timed(|| {
        let cat = make_ghz(2).unwrap();
        let mut worst = 0.0f64;
        for (si, x) in ObservableString::enumerate(2).enumerate() {
            let mut rng = Stream::derive(3, &[si as u64]);
            let mut counts = [0usize; 4];
            for _ in 0..SAMPLES {
                let y = sample_measurement(&cat, &x, &mut rng).unwrap();
                counts[(y[0].bit() << 1) | y[1].bit()] += 1;
            }
            let mut chi2 = 0.0;
            let mut df = 0usize;
            for (idx, &count) in counts.iter().enumerate() {
                let y = [
                    shadowcat_core::qsim::Outcome::from_bit(idx >> 1),
                    shadowcat_core::qsim::Outcome::from_bit(idx),
                ];
                let p = born_probability(&cat, &x, &y).unwrap();
                if p > 0.0 {
                    let expected = p * SAMPLES as f64;
                    chi2 += (count as f64 - expected).powi(2) / expected;
                    df += 1;
                } else if count > 0 {
                    return (false, f64::INFINITY);
                }
            }
            let margin = chi2 / CRITICAL[df - 2];
            worst = worst.max(margin);
            if margin > 1.0 {
                return (false, worst);
            }
        }
        (true, worst)
    });
    gate.report(
        3,
        "Born sampler chi-square",
        pass,
        &format!("9 strings x 1e5 samples, worst chi2/critical {worst:.2}"),
        elapsed,
    );
}

fn criterion_4(gate: &mut Gate) {
    let (worst, elapsed) = timed(|| {
        let hp = Hyperparams {
            num_qubits: 2,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            beta: 0.5,
        };
        let mut rng = Stream::new(21);
        let shadow = Shadow::parse_line("XZ\t+-", 1).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let params = ModelParams::init(hp.clone(), &mut rng).unwrap();
            let noise = Tensor::randn(&[2, 8], 1.0, &mut rng);
            let hp_inner = hp.clone();
            let shadow_inner = shadow.clone();
            let err = check_gradients(
                move |tape, vars| {
                    let mv = ModelVars::from_ordered(&hp_inner, vars.to_vec());
                    let (total, _, _) = model::loss_on_tape(tape, &mv, &shadow_inner, &noise);
                    total
                },
                params.tensors(),
                3e-4,
            );
            worst = worst.max(err);
        }
        worst
    });
    gate.report(
        4,
        "full loss gradient vs central differences",
        worst <= 1e-4 && elapsed < 120.0,
        &format!("worst rel err {worst:.2e} over 20 draws"),
        elapsed,
    );
}

fn criterion_5(gate: &mut Gate) {
    let (report, elapsed) = timed(|| {
        let cat = make_ghz(3).unwrap();
        // the cat state doubles as the exact-distribution sampler stub
        evaluate(&cat, &cat, 1_000_000, 1).unwrap()
    });
    gate.report(
        5,
        "oracle estimator pipeline",
        report.fidelity >= 0.99 && report.entropy_bits <= 0.1 && elapsed < 300.0,
        &format!(
            "F {:.4}, S {:.4} bits, clamp {:.2e} at M=1e6",
            report.fidelity, report.entropy_bits, report.clamp_mass
        ),
        elapsed,
    );
}

fn shadowcat(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_shadowcat"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

#[derive(Debug, Clone, Copy)]
struct PhaseRow {
    fidelity: f64,
    entropy_bits: f64,
    cat_task_acc: Option<f64>,
    xtest_acc: Option<f64>,
}

fn read_phase_row(dir: &Path) -> Result<PhaseRow, String> {
    let text = std::fs::read_to_string(dir.join("phase.csv")).map_err(|e| e.to_string())?;
    let row = text.lines().nth(1).ok_or("phase.csv has no data row")?;
    let cols: Vec<&str> = row.split(',').collect();
    let get = |i: usize| -> Result<f64, String> {
        cols.get(i)
            .ok_or_else(|| format!("phase.csv missing column {i}"))?
            .parse()
            .map_err(|e| format!("phase.csv column {i}: {e}"))
    };
    let opt = |i: usize| cols.get(i).filter(|s| !s.is_empty()).and_then(|s| s.parse().ok());
    Ok(PhaseRow {
        fidelity: get(4)?,
        entropy_bits: get(5)?,
        cat_task_acc: opt(7),
        xtest_acc: opt(8),
    })
}

/// Train and evaluate one grid point through the real binary.
fn train_and_eval(
    dir: &Path,
    n: usize,
    beta: &str,
    seed: u64,
    eval_shadows: usize,
    with_tasks: bool,
) -> Result<PhaseRow, String> {
    let dir_s = dir.to_str().unwrap();
    let n_s = n.to_string();
    let seed_s = seed.to_string();
    shadowcat(&["train", "-n", &n_s, "--beta", beta, "--seed", &seed_s, "--out", dir_s])?;
    let shadows_s = eval_shadows.to_string();
    let mut args = vec!["eval", "--ckpt", dir_s, "--shadows", &shadows_s];
    if with_tasks {
        args.push("--with-tasks");
    }
    shadowcat(&args)?;
    read_phase_row(dir)
}

fn criterion_6(gate: &mut Gate, root: &Path) -> Vec<(u64, PathBuf, PhaseRow)> {
    let mut passing = Vec::new();
    let mut lines = Vec::new();
    let (_, elapsed) = timed(|| {
        for seed in 1..=3u64 {
            let dir = root.join(format!("c6-seed{seed}"));
            match train_and_eval(&dir, 3, "2^-5", seed, 200_000, false) {
                Ok(row) => {
                    let ok = row.fidelity >= 0.9 && row.entropy_bits <= 0.5;
                    lines.push(format!(
                        "seed {seed}: F {:.3} S {:.3} {}",
                        row.fidelity,
                        row.entropy_bits,
                        if ok { "ok" } else { "miss" }
                    ));
                    if ok {
                        passing.push((seed, dir, row));
                    }
                }
                Err(e) => lines.push(format!("seed {seed}: error {e}")),
            }
        }
    });
    gate.report(
        6,
        "quantum regime (N=3, beta=2^-5)",
        passing.len() >= 2 && elapsed < 3600.0,
        &format!("{} of 3 seeds in regime; {}", passing.len(), lines.join("; ")),
        elapsed,
    );
    passing
}

fn criterion_7(gate: &mut Gate, root: &Path) {
    let mut in_regime = 0usize;
    let mut lines = Vec::new();
    let (_, elapsed) = timed(|| {
        for seed in 1..=3u64 {
            let dir = root.join(format!("c7-seed{seed}"));
            match train_and_eval(&dir, 3, "2^6", seed, 200_000, false) {
                Ok(row) => {
                    let ok = row.fidelity <= 0.3 && row.entropy_bits >= 2.0;
                    lines.push(format!(
                        "seed {seed}: F {:.3} S {:.3} {}",
                        row.fidelity,
                        row.entropy_bits,
                        if ok { "ok" } else { "miss" }
                    ));
                    if ok {
                        in_regime += 1;
                    }
                }
                Err(e) => lines.push(format!("seed {seed}: error {e}")),
            }
        }
    });
    gate.report(
        7,
        "thermal regime (N=3, beta=2^6)",
        in_regime >= 2,
        &format!("{in_regime} of 3 seeds in regime; {}", lines.join("; ")),
        elapsed,
    );
}

fn criterion_8(gate: &mut Gate, root: &Path) {
    struct Regime {
        label: &'static str,
        beta: &'static str,
        meets: fn(&PhaseRow) -> bool,
    }
    let regimes = [
        Regime {
            label: "A",
            beta: "2^-5",
            meets: |r| {
                r.cat_task_acc.is_some_and(|a| a >= 0.98) && r.xtest_acc.is_some_and(|a| a >= 0.9)
            },
        },
        Regime {
            label: "B",
            beta: "2^-1",
            meets: |r| {
                r.cat_task_acc.is_some_and(|a| a >= 0.95)
                    && r.xtest_acc.is_some_and(|a| (0.35..=0.65).contains(&a))
                    && (0.35..=0.65).contains(&r.fidelity)
            },
        },
        Regime {
            label: "C",
            beta: "2^6",
            meets: |r| r.cat_task_acc.is_some_and(|a| (0.45..=0.70).contains(&a)),
        },
    ];
    let mut best: Vec<Option<PhaseRow>> = vec![None; 3];
    let mut met = [false; 3];
    let mut lines = Vec::new();
    let (_, elapsed) = timed(|| {
        for (ri, regime) in regimes.iter().enumerate() {
            // best of 3 seeds: stop at the first seed meeting the bar
            for seed in 1..=3u64 {
                let dir = root.join(format!("c8-{}-seed{seed}", regime.label));
                match train_and_eval(&dir, 5, regime.beta, seed, 100_000, true) {
                    Ok(row) => {
                        lines.push(format!(
                            "{} seed {seed}: F {:.3} S {:.3} cat {:?} xtest {:?}",
                            regime.label, row.fidelity, row.entropy_bits,
                            row.cat_task_acc, row.xtest_acc
                        ));
                        let better = best[ri].is_none_or(|b| match regime.label {
                            "C" => row.fidelity < b.fidelity,
                            _ => row.fidelity > b.fidelity,
                        });
                        if better {
                            best[ri] = Some(row);
                        }
                        if (regime.meets)(&row) {
                            met[ri] = true;
                            best[ri] = Some(row);
                            break;
                        }
                    }
                    Err(e) => lines.push(format!("{} seed {seed}: error {e}", regime.label)),
                }
            }
        }
    });
    let ordering = match (&best[0], &best[1], &best[2]) {
        (Some(a), Some(b), Some(c)) => {
            a.fidelity > b.fidelity
                && b.fidelity > c.fidelity
                && a.entropy_bits < b.entropy_bits
                && b.entropy_bits < c.entropy_bits
        }
        _ => false,
    };
    gate.report(
        8,
        "regime ordering at N=5",
        met.iter().all(|&m| m) && ordering && elapsed < 6.0 * 3600.0,
        &format!(
            "thresholds A/B/C {met:?}, ordering F_A>F_B>F_C and S_A<S_B<S_C: {ordering}; {}",
            lines.join("; ")
        ),
        elapsed,
    );
}

fn criterion_9(gate: &mut Gate) {
    let ((worst, detail), elapsed) = timed(|| {
        let mut worst = 0.0f64;
        let cat = make_ghz(3).unwrap();
        let decohered = DensityMatrix::decohered_cat(3);
        let f = fidelity(&cat, &decohered).unwrap();
        worst = worst.max((f - 0.5).abs());
        let s_dec = von_neumann_entropy(&decohered).unwrap();
        worst = worst.max((s_dec - 1.0).abs());
        for n in 1..=5usize {
            let s = von_neumann_entropy(&DensityMatrix::maximally_mixed(n)).unwrap();
            worst = worst.max((s - n as f64).abs());
        }
        (worst, format!("F(cat,dec) {f:.9}, S(dec) {s_dec:.9}"))
    });
    gate.report(
        9,
        "analytic metric suite",
        worst <= 1e-9,
        &format!("{detail}, worst abs err {worst:.2e}"),
        elapsed,
    );
}

fn criterion_10(gate: &mut Gate) {
    let ((purity, frac), elapsed) = timed(|| {
        // three unit-variance Gaussian clusters at separation 10 sigma
        let mut rng = Stream::new(6);
        let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..20 {
                points.push(c.iter().map(|&m| m + rng.normal()).collect());
                labels.push(label);
            }
        }
        let mut cfg = EmbedConfig::defaults(6);
        cfg.perplexity = 10.0;
        let emb = tsne(&points, &cfg).unwrap();
        // 1-NN purity in the embedding
        let mut agree = 0usize;
        for i in 0..emb.coordinates.len() {
            let mut best = (f64::MAX, usize::MAX);
            for j in 0..emb.coordinates.len() {
                if i == j {
                    continue;
                }
                let d = (emb.coordinates[i][0] - emb.coordinates[j][0]).powi(2)
                    + (emb.coordinates[i][1] - emb.coordinates[j][1]).powi(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            if labels[best.1] == labels[i] {
                agree += 1;
            }
        }
        let purity = agree as f64 / emb.coordinates.len() as f64;
        let tail = &emb.kl_trace[cfg.exaggeration_iters..];
        let ok = tail.windows(2).filter(|w| w[1] <= w[0] + 1e-9).count();
        let frac = ok as f64 / (tail.len() - 1) as f64;
        (purity, frac)
    });
    gate.report(
        10,
        "t-SNE synthetic benchmark",
        purity >= 0.95 && frac >= 0.95,
        &format!("1-NN purity {purity:.3}, KL non-increasing fraction {frac:.3}"),
        elapsed,
    );
}

fn criterion_11(gate: &mut Gate, quantum_runs: &[(u64, PathBuf, PhaseRow)]) {
    let ((pass, detail), elapsed) = timed(|| {
        let Some((seed, dir, _)) = quantum_runs.first() else {
            return (false, "no quantum-regime model from criterion 6".to_string());
        };
        let bytes = match std::fs::read(dir.join("ckpt.bin")) {
            Ok(b) => b,
            Err(e) => return (false, format!("read checkpoint: {e}")),
        };
        let ckpt = match Checkpoint::from_bytes(&bytes) {
            Ok(c) => c,
            Err(e) => return (false, format!("decode checkpoint: {e}")),
        };
        let points = extract_latents(&ckpt.params).unwrap();
        let scores = cluster_scores(&points, 1).unwrap();
        let pass = scores.z_mask.exceeds_p99 && scores.n_y_mod4.exceeds_p99;
        (
            pass,
            format!(
                "seed {seed}: z_mask {:.3} (p99 {:.3}), n_Y {:.3} (p99 {:.3})",
                scores.z_mask.score,
                scores.z_mask.baseline_p99,
                scores.n_y_mod4.score,
                scores.n_y_mod4.baseline_p99
            ),
        )
    });
    gate.report(11, "latent cluster structure", pass, &detail, elapsed);
}

fn criterion_12(gate: &mut Gate, root: &Path) {
    let ((pass, detail), elapsed) = timed(|| {
        let first = root.join("c6-seed1");
        let rerun = root.join("c12-rerun");
        if let Err(e) = train_and_eval(&rerun, 3, "2^-5", 1, 200_000, false) {
            return (false, format!("rerun failed: {e}"));
        }
        for name in ["metrics.csv", "phase.csv"] {
            let a = std::fs::read(first.join(name));
            let b = std::fs::read(rerun.join(name));
            match (a, b) {
                (Ok(a), Ok(b)) if a == b => {}
                (Ok(_), Ok(_)) => return (false, format!("{name} differs between reruns")),
                (a, b) => return (false, format!("{name}: {a:?} vs {b:?}")),
            }
        }
        (true, "metrics.csv and phase.csv byte-identical".to_string())
    });
    gate.report(12, "determinism of a full rerun", pass, &detail, elapsed);
}

#[test]
fn acceptance() {
    let mut gate = Gate { failures: Vec::new() };
    let root = tempfile::tempdir().unwrap();
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate);
    criterion_5(&mut gate);
    criterion_9(&mut gate);
    criterion_10(&mut gate);
    let quantum_runs = criterion_6(&mut gate, root.path());
    criterion_11(&mut gate, &quantum_runs);
    criterion_12(&mut gate, root.path());
    criterion_7(&mut gate, root.path());
    criterion_8(&mut gate, root.path());
    assert!(
        gate.failures.is_empty(),
        "failed criteria:\n{}",
        gate.failures.join("\n")
    );
}
