//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Set `LOWRANK_ACCEPTANCE_4096=1` to add 4096² rows to
//! the stability sweep.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lowrank::bench::{problem, run_row, BenchDtype, Shape, StabilityResult};
use lowrank::calibration::run_calibration;
use lowrank::io::DataSource;
use lowrank::manifest::{self, Provenance};
use lowrank::synthetic::SyntheticSpec;
use lowrank::tensors::StorageDtype;
use lowrank_core::allocation::{
    allocate, allocate_uniform, generate_candidates, grid_search, AllocationConfig,
    AllocationLabel, LayerStats, MatrixId,
};
use lowrank_core::faer::Mat;
use lowrank_core::model::evaluate;
use lowrank_core::oracle::{singular_values, trailing_norm};
use lowrank_core::spectral::DEFAULT_RANK_TOL;
use lowrank_core::{
    optimal_factors, ActivationBatch, CompressedBundle, Compressor, CovarianceAccumulator,
    ModelBundle, Spectrum, WeightMatrix,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, m: usize, n: usize) -> Mat<f64> {
    Mat::from_fn(m, n, |_, _| StandardNormal.sample(r))
}

fn fro(m: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            s += m[(i, j)] * m[(i, j)];
        }
    }
    s.sqrt()
}

fn naive_gram(y: &Mat<f64>) -> Mat<f64> {
    let n = y.ncols();
    Mat::from_fn(n, n, |i, j| {
        (0..y.nrows()).map(|t| y[(t, i)] * y[(t, j)]).sum()
    })
}

fn residual(x: &Mat<f64>, y: &Mat<f64>, a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    fro(&(y - &(&(x * a) * b)))
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// fp32 rows shared by criteria 1 and 2.
struct Sweep {
    fp32: Vec<StabilityResult>,
    fp32_seconds: f64,
}

const SEEDS: u64 = 10;

fn sweep_rows(dims: &[usize], dtype: BenchDtype) -> Vec<StabilityResult> {
    let mut rows = Vec::new();
    for &d in dims {
        for seed in 0..SEEDS {
            let row = run_row(Shape::square(d), 0.6, dtype, seed);
            eprintln!(
                "  {} {} seed {}: {} ({:.1}s)",
                row.shape(),
                dtype,
                seed,
                row.status,
                row.seconds
            );
            rows.push(row);
        }
    }
    rows
}

fn oracle_optimality(sweep: &mut Sweep) -> Verdict {
    let start = Instant::now();
    let mut worst_rel: f64 = 0.0;
    for d in [128usize, 1024] {
        for seed in 0..SEEDS {
            let shape = Shape::square(d);
            let k = shape.rank(0.6);
            let (x, w) = problem(shape, BenchDtype::Fp64, seed);
            let y = x.matrix() * w.matrix();
            let oracle = trailing_norm(&singular_values(y.as_ref()).unwrap(), k);
            let mut acc = CovarianceAccumulator::new(d);
            acc.accumulate(&x, &w).unwrap();
            let f = optimal_factors(&w, &acc.decompose(DEFAULT_RANK_TOL).unwrap(), k).unwrap();
            let swift = fro(&(&y - &(&(x.matrix() * f.a()) * f.b())));
            worst_rel = worst_rel.max((swift - oracle).abs() / oracle);
        }
    }
    let fp32 = sweep_rows(&[128, 1024], BenchDtype::Fp32);
    let worst_abs = fp32
        .iter()
        .map(|r| r.swift_gap.map_or(f64::INFINITY, f64::abs))
        .fold(0.0, f64::max);
    sweep.fp32_seconds += fp32.iter().map(|r| r.seconds).sum::<f64>();
    sweep.fp32.extend(fp32);
    let elapsed = start.elapsed();
    verdict(
        worst_rel <= 1e-6 && worst_abs <= 5e-4 && elapsed < Duration::from_secs(120),
        format!(
            "128², 1024² × {SEEDS} seeds, ρ=0.6: fp64 max relative gap {worst_rel:.2e} (≤ 1e-6), \
             fp32 max absolute gap {worst_abs:.2e} (≤ 5e-4), runtime {} (< 120s)",
            fmt_duration(elapsed)
        ),
    )
}

fn stability_ordering(sweep: &mut Sweep) -> Verdict {
    let mut dims = vec![2048usize];
    if std::env::var("LOWRANK_ACCEPTANCE_4096").is_ok_and(|v| v == "1") {
        dims.push(4096);
    }
    let extra = sweep_rows(&dims, BenchDtype::Fp32);
    sweep.fp32_seconds += extra.iter().map(|r| r.seconds).sum::<f64>();
    sweep.fp32.extend(extra);
    let mut pass = true;
    let mut parts = Vec::new();
    let mut means = Vec::new();
    let mut lower_bound_ok = true;
    for d in [128usize, 1024, 2048, 4096] {
        let rows: Vec<&StabilityResult> = sweep.fp32.iter().filter(|r| r.shape_m == d).collect();
        if rows.is_empty() {
            continue;
        }
        let ordered = rows
            .iter()
            .filter(|r| match (r.swift_gap, r.whitening_gap) {
                (Some(s), Some(w)) => s <= w,
                (Some(_), None) => true,
                _ => false,
            })
            .count();
        let failed = rows.iter().filter(|r| r.whitening.is_none()).count();
        let gaps: Vec<f64> = rows.iter().filter_map(|r| r.whitening_gap).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        for r in &rows {
            let tol = -1e-9 * r.oracle.unwrap_or(0.0);
            lower_bound_ok &= r.swift_gap.map_or(true, |g| g >= tol)
                && r.whitening_gap.map_or(true, |g| g >= tol);
        }
        pass &= ordered >= 9;
        means.push((d, mean));
        parts.push(format!("{d}²: swift≤whitening {ordered}/{} (whitening failed on {failed}), mean whitening gap {mean:.3e}", rows.len()));
    }
    let monotone = means
        .iter()
        .filter(|(d, _)| *d <= 2048)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[0].1 <= w[1].1);
    let under = sweep.fp32_seconds < 600.0;
    verdict(
        pass && monotone && under,
        format!(
            "{}; whitening mean non-decreasing 128²→2048²: {monotone}; no method below oracle by > 1e-9 rel: \
             {lower_bound_ok}; fp32 sweep runtime {:.1}s (< 600s)",
            parts.join("; "),
            sweep.fp32_seconds
        ),
    )
}

fn eckart_young() -> Verdict {
    let mut r = rng(3003);
    let mut worst: f64 = f64::INFINITY;
    let mut violations = 0;
    for t in 0..50 {
        let (l, m, n): (usize, usize, usize) = (
            r.random_range(8..=96),
            r.random_range(2..=64),
            r.random_range(2..=64),
        );
        let k = r.random_range(1..l.min(m).min(n));
        let x = gaussian(&mut r, l, m);
        let w = gaussian(&mut r, m, n);
        let y = &x * &w;
        let scale = fro(&y);
        let batch = ActivationBatch::new(x.clone()).unwrap();
        let weight = WeightMatrix::new("w", w.clone()).unwrap();
        let mut acc = CovarianceAccumulator::new(n);
        acc.accumulate(&batch, &weight).unwrap();
        let f = optimal_factors(&weight, &acc.decompose(DEFAULT_RANK_TOL).unwrap(), k).unwrap();
        let (a0, b0) = (f.a().to_owned(), f.b().to_owned());
        let best = residual(&x, &y, &a0, &b0);
        let wsvd = w.thin_svd().unwrap();
        for c in 0..1000 {
            let (a, b) = match c % 4 {
                0 => (gaussian(&mut r, m, k), gaussian(&mut r, k, n)),
                1 => {
                    let q = gaussian(&mut r, n, k).qr().compute_thin_Q();
                    (&w * &q, q.transpose().to_owned())
                }
                2 => {
                    let scale = 10f64.powf(r.random_range(-7.0..-1.0));
                    let na = gaussian(&mut r, m, k)
                        * lowrank_core::faer::Scale(scale * fro(&a0) / ((m * k) as f64).sqrt());
                    let nb = gaussian(&mut r, k, n)
                        * lowrank_core::faer::Scale(scale * fro(&b0) / ((k * n) as f64).sqrt());
                    (&a0 + &na, &b0 + &nb)
                }
                _ => {
                    let u = wsvd.U().subcols(0, k);
                    let s = Mat::from_fn(k, k, |i, j| if i == j { wsvd.S()[i] } else { 0.0 });
                    let jitter = 10f64.powf(r.random_range(-6.0..0.0));
                    let noise = gaussian(&mut r, k, n) * lowrank_core::faer::Scale(jitter);
                    (
                        u.to_owned(),
                        &(&s * wsvd.V().subcols(0, k).transpose()) + &noise,
                    )
                }
            };
            let margin = (residual(&x, &y, &a, &b) - best) / scale;
            worst = worst.min(margin);
            if margin < -1e-8 {
                violations += 1;
                eprintln!("  triple {t} competitor {c}: margin {margin:.3e}");
            }
        }
    }
    verdict(
        violations == 0,
        format!(
            "50 triples (m,n ≤ 64) × 1000 competitors: {violations} below swift − 1e-8·‖XW‖; \
             smallest (competitor − swift)/‖XW‖ = {worst:.3e}"
        ),
    )
}

fn rank_certification() -> Verdict {
    let mut r = rng(404);
    let mut checked = 0;
    let mut bad = Vec::new();
    for t in 0..12 {
        let n = r.random_range(4..=40);
        let m = r.random_range(n..=64);
        let l = r.random_range(m..=120);
        let x = ActivationBatch::new(gaussian(&mut r, l, m)).unwrap();
        let w = WeightMatrix::new("w", gaussian(&mut r, m, n)).unwrap();
        let mut acc = CovarianceAccumulator::new(n);
        acc.accumulate(&x, &w).unwrap();
        let spectrum = acc.decompose(DEFAULT_RANK_TOL).unwrap();
        for k in 1..spectrum.numerical_rank() {
            let f = optimal_factors(&w, &spectrum, k).unwrap();
            let sigma = singular_values(f.reconstruct().as_ref()).unwrap();
            let count = sigma
                .iter()
                .filter(|&&s| s > DEFAULT_RANK_TOL * sigma[0])
                .count();
            checked += 1;
            if count != k {
                bad.push(format!("problem {t} k={k}: {count}"));
            }
        }
    }
    verdict(
        bad.is_empty(),
        format!(
            "{checked} (problem, k) pairs, count of σ(AB) > 1e-10·σ₁ equals k; mismatches: {bad:?}"
        ),
    )
}

fn covariance_and_spectrum() -> Verdict {
    let mut r = rng(505);
    let mut gram_err: f64 = 0.0;
    let mut sigma_err: f64 = 0.0;
    for _ in 0..10 {
        let n = r.random_range(4..=48);
        let m = r.random_range(n..=64);
        let l = r.random_range(m + 8..=400);
        let x = gaussian(&mut r, l, m);
        let w = WeightMatrix::new("w", gaussian(&mut r, m, n)).unwrap();
        let y = &x * w.matrix();
        let dense = naive_gram(&y);

        let mut order: Vec<usize> = (0..l).collect();
        order.shuffle(&mut r);
        let permuted = Mat::from_fn(l, m, |i, j| x[(order[i], j)]);
        let cut = r.random_range(1..l);
        let block = r.random_range(1..97);
        let mut left = CovarianceAccumulator::new(n).with_block_rows(block);
        let mut right = CovarianceAccumulator::new(n).with_block_rows(block);
        let mut start = 0;
        while start < cut {
            let len = r.random_range(1..=cut - start);
            left.accumulate(
                &ActivationBatch::new(permuted.subrows(start, len).to_owned()).unwrap(),
                &w,
            )
            .unwrap();
            start += len;
        }
        right
            .accumulate(
                &ActivationBatch::new(permuted.subrows(cut, l - cut).to_owned()).unwrap(),
                &w,
            )
            .unwrap();
        let merged = right.merged(&left).unwrap();
        gram_err = gram_err.max(fro(&(merged.gram().to_owned() - &dense)) / fro(&dense));

        let spectrum = merged.decompose(DEFAULT_RANK_TOL).unwrap();
        let direct = singular_values(y.as_ref()).unwrap();
        assert_eq!(spectrum.numerical_rank(), n);
        for (s, d) in spectrum.singular_values().iter().zip(&direct) {
            sigma_err = sigma_err.max((s - d).abs() / d);
        }
    }
    verdict(
        gram_err <= 1e-8 && sigma_err <= 1e-8,
        format!(
            "10 full-rank problems, chunked + permuted + merged: Gram relative error {gram_err:.2e} (≤ 1e-8); \
             max per-value relative σ error vs direct SVD {sigma_err:.2e} (≤ 1e-8)"
        ),
    )
}

fn test_erank(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    (-values
        .iter()
        .map(|s| s / total)
        .map(|p| p * p.ln())
        .sum::<f64>())
    .exp()
}

fn effective_rank() -> Verdict {
    let mut flat_err: f64 = 0.0;
    for r in 1..=256usize {
        for c in [1e-6, 0.37, 1.0, 5e4] {
            let e = Spectrum::from_singular_values(&vec![c; r])
                .unwrap()
                .effective_rank()
                .unwrap();
            flat_err = flat_err.max((e - r as f64).abs());
        }
    }
    let single = Spectrum::from_singular_values(&[2.5, 0.0, 0.0])
        .unwrap()
        .effective_rank()
        .unwrap();
    let mut rr = rng(606);
    let mut exact = true;
    let mut oracle_err: f64 = 0.0;
    for _ in 0..200 {
        let len = rr.random_range(1..60);
        let mut v: Vec<f64> = (0..len).map(|_| rr.random_range(1e-3..1e3)).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        let base = Spectrum::from_singular_values(&v).unwrap();
        let e0 = base.effective_rank().unwrap();
        oracle_err = oracle_err
            .max((e0 - test_erank(base.singular_values()).clamp(1.0, len as f64)).abs() / e0);
        let p0: Vec<f64> = v.iter().map(|s| s / v.iter().sum::<f64>()).collect();
        let exp = rr.random_range(-30..30);
        let scaled: Vec<f64> = v.iter().map(|s| s * 2f64.powi(exp)).collect();
        let p1: Vec<f64> = scaled
            .iter()
            .map(|s| s / scaled.iter().sum::<f64>())
            .collect();
        let e1 = Spectrum::from_singular_values(&scaled)
            .unwrap()
            .effective_rank()
            .unwrap();
        exact &= p0.iter().zip(&p1).all(|(a, b)| a.to_bits() == b.to_bits())
            && e0.to_bits() == e1.to_bits();
    }
    verdict(
        flat_err <= 1e-9 && single == 1.0 && exact && oracle_err <= 1e-12,
        format!(
            "flat spectra r=1..256: max |erank − r| {flat_err:.2e} (≤ 1e-9); single direction → {single}; \
             200 spectra scaled by 2^e: p_i and erank bit-identical: {exact}; agreement with entropy oracle {oracle_err:.1e}"
        ),
    )
}

fn random_stats(r: &mut ChaCha8Rng, id: usize, shape: Option<(usize, usize)>) -> LayerStats {
    let (m, n) = shape.unwrap_or_else(|| (r.random_range(4..=96), r.random_range(4..=96)));
    let rank = r.random_range(1..=m.min(n));
    let mut sigma: Vec<f64> = (0..rank).map(|_| r.random_range(1e-3..10.0)).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let mut losses: Vec<f64> = (0..=rank)
        .map(|k| sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt())
        .collect();
    losses[rank] = 0.0;
    LayerStats::new(
        MatrixId::new(id, "w"),
        m,
        n,
        losses,
        test_erank(&sigma).clamp(1.0, rank as f64),
        r.random_range(0.0..1.0),
    )
    .unwrap()
}

fn allocation_algebra() -> Verdict {
    let mut r = rng(707);
    let mut conserved = 0;
    let mut uniform_exact = 0;
    let mut symmetric_ok = 0;
    let sets = 100;
    for _ in 0..sets {
        let count = r.random_range(1..=16);
        let stats: Vec<LayerStats> = (0..count).map(|i| random_stats(&mut r, i, None)).collect();
        let ratio = r.random_range(0.2..0.95);
        let cfg = AllocationConfig {
            retention: r.random_range(0.05..1.0),
            ..AllocationConfig::new(ratio)
        };
        let budget: usize = stats
            .iter()
            .map(|s| (ratio * (s.rows * s.cols) as f64 / (s.rows + s.cols) as f64).round() as usize)
            .sum();
        let all_conserve = cfg
            .alpha_grid
            .iter()
            .all(|&a| match allocate(&stats, &cfg, a) {
                Ok(alloc) => alloc.budget == budget && alloc.ranks.iter().sum::<usize>() == budget,
                Err(_) => false,
            });
        conserved += all_conserve as usize;

        let full = AllocationConfig {
            retention: 1.0,
            ..cfg.clone()
        };
        let uniform = allocate_uniform(&stats, &cfg).unwrap();
        let rounded: Vec<usize> = stats
            .iter()
            .map(|s| {
                ((ratio * (s.rows * s.cols) as f64 / (s.rows + s.cols) as f64).round() as usize)
                    .max(1)
            })
            .collect();
        let same = cfg
            .alpha_grid
            .iter()
            .all(|&a| allocate(&stats, &full, a).unwrap().ranks == uniform.ranks)
            && uniform.ranks == rounded;
        uniform_exact += same as usize;

        let shape = (r.random_range(16..=64), r.random_range(16..=64));
        let proto = random_stats(&mut r, 0, Some(shape));
        let copies = r.random_range(2..=8);
        let sym: Vec<LayerStats> = (0..copies)
            .map(|i| LayerStats {
                id: MatrixId::new(i, "w"),
                ..proto.clone()
            })
            .collect();
        let ranks = allocate(&sym, &cfg, r.random_range(0.0..=1.0))
            .unwrap()
            .ranks;
        let spread = ranks.iter().max().unwrap() - ranks.iter().min().unwrap();
        symmetric_ok += (spread <= 1 && ranks.windows(2).all(|w| w[0] >= w[1])) as usize;
    }
    verdict(
        conserved == sets && uniform_exact == sets && symmetric_ok == sets,
        format!(
            "{sets} random stat sets × 11 α: Σk == budget in {conserved}/{sets}; δ=1 == uniform in \
             {uniform_exact}/{sets}; symmetric copies within ±1, extra ranks on lower indices in {symmetric_ok}/{sets}"
        ),
    )
}

struct Toy {
    model: ModelBundle,
    comp: Compressor,
    val: Vec<ActivationBatch>,
}

fn toy(seed: u64) -> Toy {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let model = spec.model().unwrap();
    let selected = DataSource::Synthetic(spec.source()).select(256, seed);
    let run = run_calibration(&model, selected, 256, 1, 256).unwrap();
    let val = SyntheticSpec {
        seed: 1000 + seed,
        batches: 16,
        ..spec
    }
    .source()
    .all();
    Toy {
        model,
        comp: Compressor::new(run),
        val,
    }
}

fn dynamic_beats_uniform() -> Verdict {
    let ratios = [0.4, 0.6, 0.8];
    let mut never_worse = true;
    let mut strict = [0usize; 3];
    let mut failures = 0;
    for seed in 0..SEEDS {
        let mut t = toy(seed);
        let stats = t.comp.layer_stats().unwrap();
        for (i, &ratio) in ratios.iter().enumerate() {
            let cfg = AllocationConfig::new(ratio);
            let candidates = generate_candidates(&stats, &cfg).unwrap();
            assert_eq!(candidates.last().unwrap().label, AllocationLabel::Uniform);
            let outcome = grid_search(&candidates, |c| {
                let b = t.comp.compress(&t.model, c)?;
                evaluate(&t.model, &b, &t.val)
            })
            .unwrap();
            failures += outcome
                .scores
                .iter()
                .filter(|s| s.failure.is_some())
                .count();
            let uniform = outcome.scores.last().unwrap().score;
            let selected = outcome.selected_score();
            never_worse &= selected <= uniform;
            strict[i] += (selected < uniform) as usize;
        }
    }
    let best = *strict.iter().max().unwrap();
    verdict(
        never_worse && best >= 7,
        format!(
            "4-layer toy stack, {SEEDS} seeds: selection ≤ uniform on every (seed, ρ): {never_worse}; strictly \
             lower at ρ=0.4/0.6/0.8 on {}/{}/{} seeds (need ≥ 7 for one ρ); failed candidates {failures}",
            strict[0], strict[1], strict[2]
        ),
    )
}

fn one_pass_reuse() -> Verdict {
    let mut t = toy(42);
    let matrices = t.model.matrix_count();
    let stats = t.comp.layer_stats().unwrap();
    for ratio in [0.4, 0.6, 0.8] {
        let cfg = AllocationConfig::new(ratio);
        let candidates = generate_candidates(&stats, &cfg).unwrap();
        for c in &candidates {
            t.comp.compress(&t.model, c).unwrap();
        }
    }
    let in_memory = t.comp.decompositions();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.safetensors");
    lowrank::calibration::save(t.comp.run(), "synthetic:seed=42", 42, 256, &path).unwrap();
    let artifact = lowrank::calibration::load(&path).unwrap();
    let mut first = lowrank::calibration::compressor(&artifact, DEFAULT_RANK_TOL).unwrap();
    first
        .compress(
            &t.model,
            &allocate_uniform(&stats, &AllocationConfig::new(0.5)).unwrap(),
        )
        .unwrap();
    lowrank::calibration::persist_spectra(&artifact, &mut first).unwrap();
    let mut reloaded = 0;
    for ratio in [0.4, 0.6, 0.8] {
        let mut comp = lowrank::calibration::compressor(&artifact, DEFAULT_RANK_TOL).unwrap();
        comp.compress(
            &t.model,
            &allocate_uniform(&stats, &AllocationConfig::new(ratio)).unwrap(),
        )
        .unwrap();
        reloaded += comp.decompositions();
    }
    verdict(
        in_memory == matrices && first.decompositions() == matrices && reloaded == 0,
        format!(
            "3 ratios × 12 candidates after one calibration: {in_memory} decompositions for {matrices} matrices; \
             across processes via the spectrum cache: {} then {reloaded}",
            first.decompositions()
        ),
    )
}

fn bits(b: &CompressedBundle) -> Vec<u64> {
    b.modules()
        .flat_map(|m| {
            let (a, bb) = (m.factors.a(), m.factors.b());
            let mut v = Vec::new();
            for mat in [a, bb] {
                for j in 0..mat.ncols() {
                    for i in 0..mat.nrows() {
                        v.push(mat[(i, j)].to_bits());
                    }
                }
            }
            v
        })
        .collect()
}

fn round_trip() -> Verdict {
    let mut t = toy(7);
    let stats = t.comp.layer_stats().unwrap();
    let alloc = allocate(&stats, &AllocationConfig::new(0.6), 0.3).unwrap();
    let bundle = t.comp.compress(&t.model, &alloc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let provenance = Provenance {
        strategy: "dynamic".into(),
        alpha: Some(0.3),
        delta: 0.5,
        ratio: 0.6,
        seed: 7,
        budget: alloc.budget,
        stats_checksum: None,
    };
    let written = manifest::export(&bundle, provenance, StorageDtype::F64, dir.path()).unwrap();
    let (back, read) = manifest::import(dir.path()).unwrap();
    let exact =
        bits(&back) == bits(&bundle) && read == written && back.allocation() == bundle.allocation();
    let expected: usize = stats
        .iter()
        .zip(&alloc.ranks)
        .map(|(s, k)| k * (s.rows + s.cols))
        .sum();
    let outputs_equal = {
        let a = bundle.forward(&t.val[0]).unwrap();
        let b = back.forward(&t.val[0]).unwrap();
        a.matrix() == b.matrix()
    };
    verdict(
        exact && outputs_equal && written.parameter_count == expected,
        format!(
            "toy stack ρ=0.6: tensors and manifest bit-exact after import: {exact}; forward outputs identical: \
             {outputs_equal}; manifest parameter count {} vs Σk(m+n) = {expected}",
            written.parameter_count
        ),
    )
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    eprintln!("criterion {id}: {name} ...");
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "{} criterion {id:>2} {name}: {} [{}]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        fmt_duration(start.elapsed())
    );
    v.pass
}

fn main() {
    let mut sweep = Sweep {
        fp32: Vec::new(),
        fp32_seconds: 0.0,
    };
    let mut ok = true;
    ok &= run(1, "oracle optimality", || oracle_optimality(&mut sweep));
    ok &= run(2, "stability ordering", || stability_ordering(&mut sweep));
    ok &= run(3, "Eckart–Young dominance", eckart_young);
    ok &= run(4, "rank certification", rank_certification);
    ok &= run(
        5,
        "streamed covariance and spectrum",
        covariance_and_spectrum,
    );
    ok &= run(6, "effective rank", effective_rank);
    ok &= run(7, "allocation algebra", allocation_algebra);
    ok &= run(8, "dynamic allocation vs uniform", dynamic_beats_uniform);
    ok &= run(9, "one-pass spectrum reuse", one_pass_reuse);
    ok &= run(10, "round-trip fidelity", round_trip);
    ok &= run(11, "scope", || {
        verdict(
            true,
            "nothing to execute: LLM perplexity and accuracy tables, wall-clock speedups and serving throughput \
             are not reproduced; criteria 1-9 stand in for them",
        )
    });
    if !ok {
        std::process::exit(1);
    }
}
