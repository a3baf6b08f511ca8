//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 5 read the Spambase grid written by
//! `naim grid --config configs/spambase.json --out runs/spambase`
//! (or the directory in `NAIM_SPAMBASE_RESULTS`). Criterion 6 needs the
//! SeismicBumps CSV at `data/seismic-bumps.csv` or `NAIM_SEISMIC_CSV`.
//! With `NAIM_ACCEPTANCE_FULL=1` missing runs are executed here, which
//! takes hours on one core. Those three criteria report FAIL when their
//! inputs are absent but do not fail the test binary; every other
//! criterion does.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use naim::experiment::{run_grid, ExperimentConfig, GridOptions, Method};
use naim::metrics::{auc, wilcoxon_signed_rank};
use naim::missingness::{augment_sample, inject_mcar_grid};
use naim::model::{
    classic_masked_attention, double_masked_attention, logits, record_forward, AttentionKind, Batch, NaimConfig,
    NaimParameters, TokenKind,
};
use naim::tensor::{Tape, Tensor};

/// Spambase NAIM at 0% train missing, test 0 / 25 / 75 %.
const REFERENCE_SPAMBASE: [(u32, f64); 3] = [(0, 98.50), (25, 97.47), (75, 88.86)];
const BAND_POINTS: f64 = 6.0;

struct Verdict {
    id: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn full_runs() -> bool {
    std::env::var("NAIM_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<TokenKind> {
    let m = rng.random_range(2..=10);
    (0..m)
        .map(|_| if rng.random_bool(0.5) { TokenKind::Numerical } else { TokenKind::Categorical(rng.random_range(2..5)) })
        .collect()
}

fn random_sample(tokens: &[TokenKind], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let miss = rng.random_range(0.0..0.8);
    let values = tokens
        .iter()
        .map(|t| match t {
            TokenKind::Numerical => rng.random_range(0.0..1.0),
            TokenKind::Categorical(k) => rng.random_range(0..*k) as f64,
        })
        .collect();
    let present = tokens.iter().map(|_| !rng.random_bool(miss)).collect();
    (values, present)
}

fn masking_property() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let tokens = random_tokens(&mut rng);
        let heads = [1, 2, 3][rng.random_range(0..3)];
        let cfg = NaimConfig { d_e: 6, layers: rng.random_range(1..=3), heads, ff_dim: 16, ..NaimConfig::default() };
        let params = NaimParameters::init(&cfg, &tokens, &mut rng).unwrap();
        let (values, present) = random_sample(&tokens, &mut rng);
        let m = tokens.len();
        let mut tape = Tape::new();
        let batch = Batch { values: &values, present: &present, n: 1 };
        let trace = record_forward(&mut tape, &params, batch, AttentionKind::Double, false).unwrap();
        for (l, &node) in trace.attention.iter().enumerate() {
            let a = tape.attention_weights(node).unwrap();
            for h in 0..heads {
                for i in 0..m {
                    let row = &a.data()[(h * m + i) * m..(h * m + i + 1) * m];
                    let ok = if present[i] {
                        (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12
                            && (0..m).all(|j| present[j] || row[j] == 0.0)
                    } else {
                        row.iter().all(|&v| v == 0.0)
                    };
                    if !ok {
                        failures.push(format!("trial {trial} layer {l} head {h} row {i}"));
                    }
                }
            }
        }
        let reference = tape.value(trace.logits).data().to_vec();
        let mut garbage = values.clone();
        for (j, v) in garbage.iter_mut().enumerate() {
            if !present[j] {
                *v = [f64::NAN, 1e300, -7.0, 99.0][rng.random_range(0..4)];
            }
        }
        let batch = Batch { values: &garbage, present: &present, n: 1 };
        let perturbed = logits(&params, batch, AttentionKind::Double).unwrap();
        let same = perturbed.data().iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            failures.push(format!("trial {trial}: logits changed"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: "1 masking property",
        pass: failures.is_empty() && secs < 60.0,
        gating: true,
        detail: format!("1000 triples, {} violations, {secs:.1}s (limit 60s){}", failures.len(), first(&failures)),
    }
}

fn first(failures: &[String]) -> String {
    failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
}

fn falsification() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let present = [true, true, false, true];
    let (mut classic_nonzero, mut double_zero) = (0, 0);
    let random = |rng: &mut ChaCha8Rng| {
        Tensor::new([4, 2], (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    };
    for _ in 0..1000 {
        let (q, k, v) = (random(&mut rng), random(&mut rng), random(&mut rng));
        let (c, _) = classic_masked_attention(&q, &k, &v, &present).unwrap();
        let (d, _) = double_masked_attention(&q, &k, &v, &present).unwrap();
        classic_nonzero += usize::from(c.row(2).iter().any(|&x| x != 0.0));
        double_zero += usize::from(d.row(2).iter().all(|&x| x == 0.0));
    }
    Verdict {
        id: "2 missing-row falsification",
        pass: classic_nonzero >= 990 && double_zero == 1000,
        gating: true,
        detail: format!("classic nonzero {classic_nonzero}/1000 (need >= 990), double zero {double_zero}/1000"),
    }
}

fn gradient_soundness() -> Verdict {
    let results = naim::gradcheck::run_suite().unwrap();
    let worst = results.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    Verdict {
        id: "3 gradcheck",
        pass: worst.max_relative_error < 1e-4,
        gating: true,
        detail: format!("{} checks, worst {} at {:.2e} (limit 1e-4)", results.len(), worst.name, worst.max_relative_error),
    }
}

/// Test percentage to (mean AUC, fold count).
type PctMeans = BTreeMap<u32, (f64, usize)>;

/// Mean AUC per test percentage over ok rows of one method at 0% train.
fn spambase_means(dir: &Path) -> Result<(PctMeans, Option<f64>), String> {
    let mut reader = csv::Reader::from_path(dir.join("results.csv")).map_err(|e| e.to_string())?;
    let mut sums: PctMeans = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if &rec[0] != "naim" || &rec[1] != "0" || &rec[8] != "ok" {
            continue;
        }
        let te: u32 = rec[2].parse().map_err(|_| "bad test_pct")?;
        let a: f64 = rec[4].parse().map_err(|_| "bad auc")?;
        let e = sums.entry(te).or_default();
        e.0 += a;
        e.1 += 1;
    }
    let means = sums.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect();
    let secs = std::fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["total_seconds"].as_f64());
    Ok((means, secs))
}

fn spambase_dir() -> PathBuf {
    std::env::var_os("NAIM_SPAMBASE_RESULTS").map_or_else(|| root().join("runs/spambase"), PathBuf::from)
}

fn spambase() -> Vec<Verdict> {
    let dir = spambase_dir();
    if !dir.join("results.csv").exists() && full_runs() {
        let cfg = ExperimentConfig::load(root().join("configs/spambase.json")).unwrap();
        run_grid(&cfg, &GridOptions { jobs: 1, out: Some(dir.clone()), verbose: false }).unwrap();
    }
    let loaded = spambase_means(&dir);
    let missing = |id| Verdict {
        id,
        pass: false,
        gating: false,
        detail: format!("no Spambase results in {} (run the grid or set NAIM_ACCEPTANCE_FULL=1)", dir.display()),
    };
    let Ok((means, secs)) = loaded else {
        return vec![missing("4 spambase 0/0 AUC"), missing("4 spambase wall-clock"), missing("5 missing-robustness trend")];
    };
    let mut out = Vec::new();
    match means.get(&0) {
        Some(&(m, n)) => out.push(Verdict {
            id: "4 spambase 0/0 AUC",
            pass: n == 5 && m >= 0.95,
            gating: false,
            detail: format!("mean AUC {:.2} over {n} folds (need >= 95.00; reference 98.50)", m * 100.0),
        }),
        None => out.push(missing("4 spambase 0/0 AUC")),
    }
    out.push(match secs {
        Some(s) => Verdict {
            id: "4 spambase wall-clock",
            pass: s <= 3600.0,
            gating: false,
            detail: format!("{:.1} min for the whole grid (target <= 60 min)", s / 60.0),
        },
        None => missing("4 spambase wall-clock"),
    });
    let cells: Vec<Option<(f64, usize)>> = REFERENCE_SPAMBASE.iter().map(|(te, _)| means.get(te).copied()).collect();
    if cells.iter().any(|c| c.is_none_or(|(_, n)| n != 5)) {
        out.push(missing("5 missing-robustness trend"));
        return out;
    }
    let aucs: Vec<f64> = cells.iter().map(|c| c.unwrap().0 * 100.0).collect();
    let monotone = aucs.windows(2).all(|w| w[1] <= w[0]);
    let in_band = REFERENCE_SPAMBASE.iter().zip(&aucs).all(|((_, p), a)| (a - p).abs() <= BAND_POINTS);
    let detail = REFERENCE_SPAMBASE
        .iter()
        .zip(&aucs)
        .map(|((te, p), a)| format!("0/{te}: {a:.2} (reference {p:.2})"))
        .collect::<Vec<_>>()
        .join(", ");
    out.push(Verdict {
        id: "5 missing-robustness trend",
        pass: monotone && aucs[2] >= 80.0 && in_band,
        gating: false,
        detail: format!("{detail}; non-increasing {monotone}, 75% >= 80 {}, within ±6 {in_band}", aucs[2] >= 80.0),
    });
    out
}

fn seismic() -> Verdict {
    let csv = std::env::var_os("NAIM_SEISMIC_CSV").map_or_else(|| root().join("data/seismic-bumps.csv"), PathBuf::from);
    let id = "6 regularization ablation";
    if !csv.exists() {
        return Verdict { id, pass: false, gating: false, detail: format!("SeismicBumps CSV not found at {}", csv.display()) };
    }
    let dir = root().join("runs/seismic-bumps");
    if !dir.join("results.csv").exists() {
        if !full_runs() {
            return Verdict { id, pass: false, gating: false, detail: "SeismicBumps grid not run (set NAIM_ACCEPTANCE_FULL=1)".into() };
        }
        let mut cfg = ExperimentConfig::load(root().join("configs/seismic-bumps.json")).unwrap();
        cfg.dataset = csv;
        cfg.methods = vec![Method::Naim, Method::NaimNoReg, Method::NaimNoRegMean];
        cfg.train_missing = vec![0.0];
        cfg.test_missing = vec![0.5, 0.75];
        cfg.train.max_epochs = 300;
        if let Err(e) = run_grid(&cfg, &GridOptions { jobs: 1, out: Some(dir.clone()), verbose: false }) {
            return Verdict { id, pass: false, gating: false, detail: format!("grid failed: {e}") };
        }
    }
    let mut reader = csv::Reader::from_path(dir.join("results.csv")).unwrap();
    let mut sums: BTreeMap<(String, u32), (f64, usize)> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        if &rec[1] == "0" && &rec[8] == "ok" {
            let e = sums.entry((rec[0].to_string(), rec[2].parse().unwrap())).or_default();
            e.0 += rec[4].parse::<f64>().unwrap();
            e.1 += 1;
        }
    }
    let mean = |m: &str, te: u32| sums.get(&(m.to_string(), te)).filter(|(_, n)| *n == 5).map(|(s, n)| s / *n as f64);
    match (mean("naim", 50), mean("naim-no-reg", 50), mean("naim-no-reg+mean", 75), mean("naim-no-reg", 75)) {
        (Some(a), Some(b), Some(c), Some(d)) => Verdict {
            id,
            pass: a > b && c > d,
            gating: false,
            detail: format!(
                "0/50: naim {:.2} vs w/o reg {:.2}; 0/75: w/o reg+mean {:.2} vs w/o reg {:.2}",
                a * 100.0,
                b * 100.0,
                c * 100.0,
                d * 100.0
            ),
        },
        _ => Verdict { id, pass: false, gating: false, detail: "incomplete SeismicBumps results".into() },
    }
}

fn mcar_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    for case in 0..500 {
        let rows = rng.random_range(2..40);
        let cols = rng.random_range(2..15);
        let p: f64 = rng.random_range(0.0..0.8);
        let pre = rng.random_range(0.0..0.1);
        let mut present: Vec<bool> = (0..rows * cols).map(|_| !rng.random_bool(pre)).collect();
        // Keep the input free of fully missing lines.
        for i in 0..rows {
            present[i * cols + i % cols] = true;
        }
        for j in 0..cols {
            present[(j % rows) * cols + j] = true;
        }
        let existing = present.iter().filter(|&&v| !v).count();
        let target = ((rows * cols) as f64 * p).round() as usize;
        let expected = existing.max(target);
        let feasible = rows * cols - expected >= rows.max(cols);
        match inject_mcar_grid(&present, rows, cols, p, &mut rng) {
            Ok(out) => {
                let missing = out.iter().filter(|&&v| !v).count();
                let full_row = (0..rows).any(|i| (0..cols).all(|j| !out[i * cols + j]));
                let full_col = (0..cols).any(|j| (0..rows).all(|i| !out[i * cols + j]));
                let unmasked = present.iter().zip(&out).any(|(a, b)| !a && *b);
                if missing != expected || full_row || full_col || unmasked || !feasible {
                    bad.push(format!("case {case} {rows}x{cols} p={p:.3}"));
                }
            }
            Err(_) if !feasible => {}
            Err(e) => bad.push(format!("case {case} {rows}x{cols} p={p:.3}: {e}")),
        }
    }
    let (rows, cols, trials) = (20, 10, 1000);
    let mut counts = vec![0usize; rows * cols];
    let mut full_lines = 0;
    for t in 0..trials {
        let out = inject_mcar_grid(&vec![true; rows * cols], rows, cols, 0.5, &mut ChaCha8Rng::seed_from_u64(1000 + t)).unwrap();
        full_lines += usize::from(
            (0..rows).any(|i| (0..cols).all(|j| !out[i * cols + j])) || (0..cols).any(|j| (0..rows).all(|i| !out[i * cols + j])),
        );
        for (c, &v) in counts.iter_mut().zip(&out) {
            *c += usize::from(!v);
        }
    }
    let expect = trials as f64 * 0.5;
    let sigma = (trials as f64 * 0.25).sqrt();
    let outliers = counts.iter().filter(|&&c| (c as f64 - expect).abs() > 3.0 * sigma).count();
    Verdict {
        id: "7 MCAR exactness",
        pass: bad.is_empty() && outliers == 0 && full_lines == 0,
        gating: true,
        detail: format!(
            "500 cases, {} violations{}; 20x10 p=0.5 over 1000 trials: {outliers} cells outside 3σ, {full_lines} trials with full lines",
            bad.len(),
            first(&bad)
        ),
    }
}

fn augmentation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let present = [true, false, true, true, false, true];
    let n = 100_000;
    let mut applied = 0usize;
    let mut c_counts = [0usize; 3];
    let mut invalid = 0;
    for _ in 0..n {
        let (out, a) = augment_sample(&present, &mut rng);
        let hidden = present.iter().zip(&out).filter(|(p, o)| **p && !**o).count();
        invalid += usize::from(present.iter().zip(&out).any(|(p, o)| !p && *o) || hidden != a.masked);
        if a.applied {
            applied += 1;
            match a.masked {
                1..=3 => c_counts[a.masked - 1] += 1,
                _ => invalid += 1,
            }
        } else if a.masked != 0 {
            invalid += 1;
        }
    }
    let rate = applied as f64 / n as f64;
    let (e, s) = (applied as f64 / 3.0, (applied as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
    let uniform = c_counts.iter().all(|&c| (c as f64 - e).abs() <= 3.0 * s);
    Verdict {
        id: "8 augmentation distribution",
        pass: (rate - 0.5).abs() <= 0.01 && uniform && invalid == 0,
        gating: true,
        detail: format!("apply rate {rate:.4} (0.50 ± 0.01), c counts {c_counts:?} (each {e:.0} ± {:.0}), {invalid} invalid", 3.0 * s),
    }
}

fn pair_count_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Two-sided exact p by listing all sign assignments of the ranked
/// magnitudes.
fn sign_enumeration_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    let doubled: Vec<u64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as u64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as u64;
            2 * less + equal + 1
        })
        .collect();
    let w: u64 = doubled.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
        le += u64::from(s <= w);
        ge += u64::from(s >= w);
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut auc_bad = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..20);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        auc_bad += usize::from(auc(&scores, &labels).unwrap() != pair_count_auc(&scores, &labels));
    }
    let mut wil_bad = 0;
    let mut wil_cases = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=12);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        if d.iter().all(|x| *x == 0.0) {
            continue;
        }
        wil_cases += 1;
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        wil_bad += usize::from(!r.exact || r.p_value != sign_enumeration_p(&d));
    }
    Verdict {
        id: "9 metric oracles",
        pass: auc_bad == 0 && wil_bad == 0,
        gating: true,
        detail: format!("AUC mismatches {auc_bad}/500, exact Wilcoxon mismatches {wil_bad}/{wil_cases}"),
    }
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig::load(root().join("configs/toy.json")).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_grid(&cfg, &GridOptions { jobs: 2, out: Some(d.path().to_path_buf()), verbose: false }).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("results.csv")).unwrap();
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    Verdict {
        id: "10 determinism",
        pass: a == b && !a.is_empty(),
        gating: true,
        detail: format!("two toy grid runs ({} cells), results.csv {} bytes, identical {}", cfg.cell_count(), a.len(), a == b),
    }
}

fn main() {
    let mut verdicts = vec![masking_property(), falsification(), gradient_soundness()];
    verdicts.extend(spambase());
    verdicts.push(seismic());
    verdicts.extend([mcar_exactness(), augmentation(), metric_oracles(), determinism()]);
    let mut gate_failed = false;
    for v in &verdicts {
        println!("{} criterion {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.detail);
        gate_failed |= v.gating && !v.pass;
    }
    if gate_failed {
        std::process::exit(1);
    }
}
