//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use layerflow::clustering::{kmeans_stein_with_trace, MeanKind};
use layerflow::features::{build_distance_matrix, DescriptorConfig, DistanceMatrix, Neighborhood};
use layerflow::flow::{
    flow_step, generalized_likelihood, integrate, similarity, FlowConfig, NeighborhoodGraph,
};
use layerflow::linalg::Mat;
use layerflow::metrics::{count_order_violations, dice, LabeledVolume};
use layerflow::ordering::{
    construct_ordered_coupling, grid_ascans, is_ordered, is_ordered_within,
    ordering_energy_gradient_of_rows, ordering_energy_of_rows, OrderingOperator, OrderingPenaltyConfig,
    PairWindow,
};
use layerflow::phantom::{generate_phantom, InclusionConfig, PhantomConfig};
use layerflow::pipeline::{nearest_labels, segment_distances, train_dictionary, SegmentConfig, TrainConfig};
use layerflow::simplex::{
    exp_affine, exp_affine_inverse, exp_lifted, exp_lifted_raw_into, project_tangent, replicator_map,
    AssignmentMatrix, ProbabilityVector, TangentVector,
};
use layerflow::spd::{
    karcher_residual, log_euclidean_mean, riemannian_distance, riemannian_mean, riemannian_mean_with_stats,
    sample_wishart, stein_divergence, stein_mean, MeanConfig, SpdMatrix, WeightedSample,
};

type Outcome = Result<String, String>;

type Criterion = (usize, &'static str, f64, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, c: usize, spread: f64) -> ProbabilityVector<f64> {
    let w: Vec<f64> = (0..c).map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    ProbabilityVector::from_weights(w).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut round, mut comm, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let c = rng.random_range(2..=16);
        let p = random_simplex(&mut rng, c, 1.0);
        let q = random_simplex(&mut rng, c, 1.0);
        let v = exp_affine_inverse(&p, &q).unwrap();
        let back = exp_affine(&p, &v).unwrap();
        round = round.max(max_abs_diff(back.as_slice(), q.as_slice()));
        let again = exp_affine_inverse(&p, &back).unwrap();
        round = round.max(max_abs_diff(again.as_slice(), v.as_slice()));

        let x: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let rx = replicator_map(&p, &x).unwrap();
        let r_pi = replicator_map(&p, project_tangent(&x).unwrap().as_slice()).unwrap();
        let pi_r = project_tangent(rx.as_slice()).unwrap();
        comm = comm
            .max(max_abs_diff(r_pi.as_slice(), rx.as_slice()))
            .max(max_abs_diff(pi_r.as_slice(), rx.as_slice()));

        let k: f64 = 10.0 * rng.sample::<f64, _>(StandardNormal);
        let xs: Vec<f64> = x.iter().map(|v| v + k).collect();
        let a = exp_lifted(&p, &x).unwrap();
        let b = exp_lifted(&p, &xs).unwrap();
        shift = shift.max(max_abs_diff(a.as_slice(), b.as_slice()));
    }
    ensure(round < 1e-10, || format!("round trip {round:.2e}"))?;
    ensure(comm < 1e-13, || format!("replicator commutation {comm:.2e}"))?;
    ensure(shift < 1e-12, || format!("shift invariance {shift:.2e}"))?;
    Ok(format!("round trip {round:.1e}, commutation {comm:.1e}, shift {shift:.1e}"))
}

fn random_invertible(rng: &mut ChaCha8Rng, d: usize) -> Mat<f64> {
    let mut a = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    for i in 0..d {
        a[(i, i)] += 2.0 * (d as f64).sqrt();
    }
    a
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Mat<f64> {
    let g = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&g + &g.transpose()).sym_eig().unwrap().vectors
}

/// `U Diag(v) Uᵀ`.
fn with_eigenvalues(u: &Mat<f64>, v: &[f64]) -> SpdMatrix<f64> {
    SpdMatrix::new(Mat::congruence(u, &Mat::from_diag(v)).symmetrize()).unwrap()
}

fn frobenius_gap(a: &SpdMatrix<f64>, b: &SpdMatrix<f64>) -> f64 {
    (a.as_mat() - b.as_mat()).frobenius_norm()
}

fn spd_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut congr, mut scale) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let s = sample_wishart::<f64, _>(&mut rng, 8, 12);
        let t = sample_wishart::<f64, _>(&mut rng, 8, 12);
        let d0 = riemannian_distance(&s, &t).unwrap();
        let a = random_invertible(&mut rng, 8);
        let sa = SpdMatrix::new(Mat::congruence(&a.transpose(), s.as_mat()).symmetrize()).unwrap();
        let ta = SpdMatrix::new(Mat::congruence(&a.transpose(), t.as_mat()).symmetrize()).unwrap();
        congr = congr.max((riemannian_distance(&sa, &ta).unwrap() - d0).abs());
        let alpha = rng.random_range(0.01..100.0);
        let d1 = riemannian_distance(&s.scale(alpha).unwrap(), &t.scale(alpha).unwrap()).unwrap();
        scale = scale.max((d1 - d0).abs());
    }
    ensure(congr < 1e-8, || format!("congruence {congr:.2e}"))?;
    ensure(scale < 1e-8, || format!("scaling {scale:.2e}"))?;

    let cfg = mean_config();
    let mut residual = 0.0f64;
    for trial in 0..20 {
        let d = 2 + trial % 9;
        let n = 2 + (trial * 7) % 19;
        let mats: Vec<SpdMatrix<f64>> = (0..n).map(|_| sample_wishart(&mut rng, d, d + 2)).collect();
        let samples = WeightedSample::uniform(&mats);
        let out = riemannian_mean_with_stats(&samples, &cfg).map_err(|e| format!("mean d={d} N={n}: {e}"))?;
        residual = residual.max(karcher_residual(&out.mean, &samples).unwrap());
    }
    ensure(residual <= 1e-8, || format!("mean residual {residual:.2e}"))?;

    // Arbitrary commuting sets for the Riemannian and Log-Euclidean means. The Stein mean
    // coincides with them on commuting sets closed under reflection of the logarithms
    // about their mean, so it is checked on reciprocal pairs around a common center.
    let mut agree = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=6);
        let u = random_orthogonal(&mut rng, d);
        let n = rng.random_range(2..=8);
        let mats: Vec<SpdMatrix<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| (rng.sample::<f64, _>(StandardNormal)).exp()).collect();
                with_eigenvalues(&u, &v)
            })
            .collect();
        let samples = WeightedSample::uniform(&mats);
        let le = log_euclidean_mean(&samples).unwrap();
        let rm = riemannian_mean(&samples, &cfg).map_err(|e| e.to_string())?;
        agree = agree.max(frobenius_gap(&le, &rm));

        let center: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut pairs = Vec::new();
        for _ in 0..rng.random_range(1..=4) {
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0f64).exp()).collect();
            let up: Vec<f64> = center.iter().zip(&f).map(|(c, f)| c * f).collect();
            let down: Vec<f64> = center.iter().zip(&f).map(|(c, f)| c / f).collect();
            pairs.push(with_eigenvalues(&u, &up));
            pairs.push(with_eigenvalues(&u, &down));
        }
        let samples = WeightedSample::uniform(&pairs);
        let le = log_euclidean_mean(&samples).unwrap();
        let rm = riemannian_mean(&samples, &cfg).map_err(|e| e.to_string())?;
        let st = stein_mean(&samples, &cfg).map_err(|e| e.to_string())?;
        let truth = with_eigenvalues(&u, &center);
        for m in [&le, &rm, &st] {
            agree = agree.max(frobenius_gap(m, &truth));
        }
    }
    ensure(agree < 1e-7, || format!("commuting means differ by {agree:.2e}"))?;

    let pair = [SpdMatrix::from_diag(&[1.0]).unwrap(), SpdMatrix::from_diag(&[9.0]).unwrap()];
    let s = stein_mean(&WeightedSample::uniform(&pair), &cfg).map_err(|e| e.to_string())?;
    let scalar_err = (s.as_mat()[(0, 0)] - 3.0).abs();
    ensure(scalar_err < 1e-8, || format!("scalar Stein mean off by {scalar_err:.2e}"))?;
    Ok(format!(
        "congruence {congr:.1e}, scaling {scale:.1e}, residual {residual:.1e}, commuting {agree:.1e}, scalar {scalar_err:.1e}"
    ))
}

/// Default tolerance with room for the slowly contracting accumulated step rule on
/// ill-conditioned sample sets.
fn mean_config() -> MeanConfig<f64> {
    MeanConfig {
        max_iters: 1000,
        ..MeanConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn approximation_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = mean_config();
    let (mut to_stein, mut to_le) = (Vec::new(), Vec::new());
    for _ in 0..25 {
        // Wishart scatter around a random anisotropic center, like descriptors of one layer
        let root = sample_wishart::<f64, _>(&mut rng, 10, 20).sqrt().into_mat();
        let mats: Vec<SpdMatrix<f64>> = (0..20)
            .map(|_| {
                let w = sample_wishart::<f64, _>(&mut rng, 10, 20);
                SpdMatrix::new(Mat::congruence(&root, w.as_mat()).symmetrize()).unwrap()
            })
            .collect();
        let samples = WeightedSample::uniform(&mats);
        let rm = riemannian_mean(&samples, &cfg).map_err(|e| e.to_string())?;
        let st = stein_mean(&samples, &cfg).map_err(|e| e.to_string())?;
        let le = log_euclidean_mean(&samples).unwrap();
        to_stein.push(riemannian_distance(&rm, &st).unwrap());
        to_le.push(riemannian_distance(&rm, &le).unwrap());
    }
    let (ms, ml) = (median(to_stein), median(to_le));
    ensure(ms < ml, || format!("median to Stein {ms:.4e} not below median to Log-Euclidean {ml:.4e}"))?;
    Ok(format!("25 trials, median d_R to Stein {ms:.3e} < to Log-Euclidean {ml:.3e}"))
}

fn ordering_suite() -> Outcome {
    for c in 1..=6usize {
        ensure(OrderingOperator::<i64>::new(c).is_inverse_pair(), || format!("B Q != I for c={c}"))?;
        for l1 in 0..c {
            for l2 in 0..c {
                let a: Vec<i64> = (0..c).map(|k| i64::from(k == l1)).collect();
                let b: Vec<i64> = (0..c).map(|k| i64::from(k == l2)).collect();
                ensure(is_ordered_within(&a, &b, 0) == (l1 <= l2), || {
                    format!("label pair ({l1}, {l2}) misjudged for c={c}")
                })?;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let c = rng.random_range(2..=5);
        let gamma = rng.random_range(0.1..1.0);
        let window = if rng.random_bool(0.5) { PairWindow::Full } else { PairWindow::Band(1) };
        let cfg = OrderingPenaltyConfig::new(gamma, window).unwrap();
        let rows: Vec<f64> = (0..n).flat_map(|_| random_simplex(&mut rng, c, 1.0).into_vec()).collect();
        let grad = ordering_energy_gradient_of_rows(&rows, c, &cfg).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..rows.len())
            .map(|k| {
                let mut up = rows.clone();
                let mut dn = rows.clone();
                up[k] += h;
                dn[k] -= h;
                (ordering_energy_of_rows(&up, c, &cfg).unwrap() - ordering_energy_of_rows(&dn, c, &cfg).unwrap())
                    / (2.0 * h)
            })
            .collect();
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        worst = worst.max(num / den);
    }
    ensure(worst < 1e-5, || format!("gradient relative error {worst:.2e}"))?;

    let (mut marg, mut neg, mut lower) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let c = rng.random_range(2..=5);
        let wi = random_simplex(&mut rng, c, 1.0).into_vec();
        // push mass of w_i toward deeper labels
        let mut wj = vec![0.0; c];
        for (l, &mass) in wi.iter().enumerate() {
            let mut rest = mass;
            for slot in wj.iter_mut().take(c - 1).skip(l) {
                let part = rest * rng.random_range(0.0..1.0);
                *slot += part;
                rest -= part;
            }
            wj[c - 1] += rest;
        }
        ensure(is_ordered(&wi, &wj), || "generated pair is not ordered".into())?;
        let m = construct_ordered_coupling(&wi, &wj).map_err(|e| e.to_string())?;
        for r in 0..c {
            let row: f64 = m[r * c..(r + 1) * c].iter().sum();
            let col: f64 = (0..c).map(|k| m[k * c + r]).sum();
            marg = marg.max((row - wi[r]).abs()).max((col - wj[r]).abs());
            for k in 0..c {
                neg = neg.min(m[r * c + k]);
                if k < r {
                    lower += m[r * c + k].abs();
                }
            }
        }
    }
    ensure(marg < 1e-10, || format!("coupling marginals off by {marg:.2e}"))?;
    ensure(neg >= -1e-12, || format!("coupling entry {neg:.2e}"))?;
    ensure(lower == 0.0, || format!("coupling mass below diagonal {lower:.2e}"))?;
    Ok(format!(
        "label pairs exact for c<=6, gradient rel err {worst:.1e}, coupling marginals {marg:.1e}, min entry {neg:.1e}"
    ))
}

fn random_distances(rng: &mut ChaCha8Rng, n: usize, c: usize) -> DistanceMatrix<f64> {
    DistanceMatrix::new(n, c, (0..n * c).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
}

fn flow_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let dims = [6, 4, 3];
    let n = 72;
    let c = 4;
    let cfg = FlowConfig {
        neighborhood: Neighborhood::new(3, 3, 3).unwrap(),
        ..FlowConfig::default()
    };
    let graph = NeighborhoodGraph::grid(dims, cfg.neighborhood).unwrap();
    let ascans = grid_ascans(dims);
    let d = random_distances(&mut rng, n, c);

    let mut w = AssignmentMatrix::barycenter(n, c);
    let mut drift = 0.0f64;
    let mut raw = vec![0.0; c];
    for _ in 0..1000 {
        let s = similarity(&generalized_likelihood(&w, &d, &ascans, &cfg).unwrap(), &graph).unwrap();
        for i in 0..n {
            let x: Vec<f64> = s.row(i).iter().map(|v| cfg.step * v).collect();
            exp_lifted_raw_into(w.row(i), &x, &mut raw);
            drift = drift.max((raw.iter().sum::<f64>() - 1.0).abs());
        }
        w = flow_step(&w, &d, &graph, &ascans, &cfg, true).unwrap();
    }
    ensure(drift < 1e-9, || format!("row-sum drift {drift:.2e}"))?;

    // Exp/Exp⁻¹ composition with a random base point, neighbors enumerated directly
    let l = AssignmentMatrix::from_rows(&(0..n).map(|_| random_simplex(&mut rng, c, 1.0)).collect::<Vec<_>>()).unwrap();
    let s = similarity(&l, &graph).unwrap();
    let mut sim_err = 0.0f64;
    for i in 0..n {
        let [di, ai, bi] = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        let base = random_simplex(&mut rng, c, 0.5);
        let mut acc = vec![0.0; c];
        let mut count = 0.0;
        for k in 0..n {
            let [dk, ak, bk] = [k % dims[0], (k / dims[0]) % dims[1], k / (dims[0] * dims[1])];
            if di.abs_diff(dk) <= 1 && ai.abs_diff(ak) <= 1 && bi.abs_diff(bk) <= 1 {
                let v = exp_affine_inverse(&base, &l.row_vector(k)).unwrap();
                acc.iter_mut().zip(v.as_slice()).for_each(|(a, b)| *a += b);
                count += 1.0;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count);
        let oracle = exp_affine(&base, &TangentVector::new(acc).unwrap()).unwrap();
        sim_err = sim_err.max(max_abs_diff(oracle.as_slice(), s.row(i)));
    }
    ensure(sim_err < 1e-12, || format!("similarity vs oracle {sim_err:.2e}"))?;

    // dyadic entries keep the row shifts exact
    let base: Vec<f64> = (0..n * c).map(|_| rng.random_range(0..64) as f64 / 32.0).collect();
    let shifted: Vec<f64> = base
        .chunks(c)
        .flat_map(|row| {
            let k = rng.random_range(0..16) as f64 / 8.0;
            row.iter().map(move |v| v + k).collect::<Vec<_>>()
        })
        .collect();
    let d0 = DistanceMatrix::new(n, c, base).unwrap();
    let d1 = DistanceMatrix::new(n, c, shifted).unwrap();
    let short = FlowConfig { max_steps: 300, ..cfg };
    for ordered in [false, true] {
        let mut w0 = AssignmentMatrix::barycenter(n, c);
        let mut w1 = w0.clone();
        for step in 0..300 {
            w0 = flow_step(&w0, &d0, &graph, &ascans, &short, ordered).unwrap();
            w1 = flow_step(&w1, &d1, &graph, &ascans, &short, ordered).unwrap();
            let same = w0.as_slice().iter().zip(w1.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("trajectories split at step {step} (ordered: {ordered})"))?;
        }
    }

    let single = DistanceMatrix::new(1, 2, vec![0.0, 10.0]).unwrap();
    let one = FlowConfig {
        neighborhood: Neighborhood::new(1, 1, 1).unwrap(),
        ..FlowConfig::default()
    };
    let (w, trace) = integrate(&single, &NeighborhoodGraph::isolated(1), &grid_ascans([1, 1, 1]), &one, false)
        .map_err(|e| e.to_string())?;
    ensure(trace.converged && w.row(0)[0] > 0.999, || format!("single voxel ended at {:?}", w.row(0)))?;
    Ok(format!(
        "drift {drift:.1e}, similarity {sim_err:.1e}, shifted trajectories bitwise equal, single voxel -> {:.6} in {} steps",
        w.row(0)[0],
        trace.records.len()
    ))
}

/// Settings of the end-to-end runs: log-spaced layer means with mild additive noise, and
/// a distance scale that lets the data term commit before the ordering term saturates.
fn phantom_flow() -> FlowConfig<f64> {
    FlowConfig {
        rho: 0.1,
        ordering_weight: 0.3,
        ..FlowConfig::default()
    }
}

fn descriptor(scale: f64) -> DescriptorConfig {
    DescriptorConfig {
        scales: vec![scale],
        ..DescriptorConfig::default()
    }
}

fn layer_dice(pred: &LabeledVolume, truth: &LabeledVolume) -> Vec<f64> {
    (0..truth.c()).map(|l| dice(pred, truth, l).unwrap()).collect()
}

fn fmt_dice(v: &[f64]) -> String {
    v.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(" ")
}

fn distances_for(phantom: &PhantomConfig, desc: &DescriptorConfig) -> Result<(DistanceMatrix<f64>, LabeledVolume), String> {
    let (vol, truth) = generate_phantom::<f64>(phantom).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        k: 8,
        descriptor: desc.clone(),
        ..TrainConfig::default()
    };
    let dict = train_dictionary(&vol, &truth, &train).map_err(|e| e.to_string())?;
    let d = build_distance_matrix(&vol, &dict, desc).map_err(|e| e.to_string())?;
    Ok((d, truth))
}

fn end_to_end() -> Outcome {
    let phantom = PhantomConfig::default();
    let desc = descriptor(0.7);
    let (d, truth) = distances_for(&phantom, &desc)?;
    let near = count_order_violations(&nearest_labels(phantom.dims, &d).unwrap());
    ensure(near > 100, || format!("nearest-prototype labeling has only {near} violations"))?;
    let seg = SegmentConfig {
        descriptor: desc,
        flow: FlowConfig {
            gamma: 0.1,
            step: 0.1,
            neighborhood: Neighborhood::new(5, 5, 3).unwrap(),
            ..phantom_flow()
        },
        ordered: true,
    };
    let out = segment_distances(phantom.dims, d, &seg).map_err(|e| e.to_string())?;
    let viol = count_order_violations(&out.labels);
    let dices = layer_dice(&out.labels, &truth);
    ensure(out.trace.converged, || "flow did not converge".into())?;
    ensure(viol == 0, || format!("{viol} violations, dice {}", fmt_dice(&dices)))?;
    ensure(dices.iter().all(|&v| v >= 0.95), || format!("dice {}", fmt_dice(&dices)))?;
    Ok(format!(
        "nearest-prototype violations {near}, ordered flow 0 violations in {} steps, dice {}",
        out.trace.records.len(),
        fmt_dice(&dices)
    ))
}

fn ablation() -> Outcome {
    // layers of nearby brightness with blobs that imitate a distant layer
    let phantom = PhantomConfig {
        means: vec![1.0, 2.8, 0.5, 2.0, 0.7, 1.4],
        noise: 0.1,
        inclusions: Some(InclusionConfig::default()),
        ..PhantomConfig::default()
    };
    let desc = descriptor(1.0);
    let (d, _) = distances_for(&phantom, &desc)?;
    let run = |ordered: bool, gamma: f64| -> Result<usize, String> {
        let seg = SegmentConfig {
            descriptor: desc.clone(),
            flow: FlowConfig {
                gamma,
                rho: 0.3,
                ordering_weight: 0.1,
                ..FlowConfig::default()
            },
            ordered,
        };
        let out = segment_distances(phantom.dims, d.clone(), &seg).map_err(|e| e.to_string())?;
        Ok(count_order_violations(&out.labels))
    };
    let plain = run(false, 0.1)?;
    let coarse = run(true, 0.5)?;
    let fine = run(true, 0.1)?;
    ensure(fine == 0 && plain > 0, || format!("plain {plain}, ordered {fine}"))?;
    ensure(fine <= coarse, || format!("gamma 0.5 gives {coarse}, gamma 0.1 gives {fine}"))?;
    Ok(format!("violations plain {plain}, ordered gamma 0.5 {coarse}, ordered gamma 0.1 {fine}"))
}

fn clustering() -> Outcome {
    let cfg = MeanConfig {
        max_iters: 500,
        ..MeanConfig::default()
    };
    let mut steps = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<SpdMatrix<f64>> = (0..40).map(|_| sample_wishart(&mut rng, 3, 4)).collect();
        let out = kmeans_stein_with_trace(&samples, 4, seed, &cfg, MeanKind::Stein).map_err(|e| e.to_string())?;
        ensure(out.objective.windows(2).all(|w| w[1] <= w[0]), || {
            format!("objective increased on seed {seed}: {:?}", out.objective)
        })?;
        steps += out.objective.len();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let u = random_orthogonal(&mut rng, 4);
    let generators = [
        with_eigenvalues(&u, &[1.0, 2.0, 0.5, 1.5]),
        with_eigenvalues(&u, &[6.0, 0.4, 3.0, 8.0]),
    ];
    let roots: Vec<Mat<f64>> = generators.iter().map(|g| g.sqrt().into_mat()).collect();
    let samples: Vec<SpdMatrix<f64>> = (0..80)
        .map(|i| {
            let w = sample_wishart::<f64, _>(&mut rng, 4, 400);
            SpdMatrix::new(Mat::congruence(&roots[i % 2], w.as_mat()).symmetrize()).unwrap()
        })
        .collect();
    let out = kmeans_stein_with_trace(&samples, 2, 9, &cfg, MeanKind::Stein).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for g in &generators {
        let best = out
            .centers
            .iter()
            .map(|c| stein_divergence(c, g).unwrap())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    ensure(worst < 0.05, || format!("center divergence {worst:.3e}"))?;
    Ok(format!("50 monotone runs ({steps} objective records), recovery divergence {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "geometry", 5.0, geometry),
        (2, "spd", 30.0, spd_suite),
        (3, "approximation quality", 60.0, approximation_quality),
        (4, "ordering", 20.0, ordering_suite),
        (5, "flow", 30.0, flow_suite),
        (6, "end-to-end phantom", 300.0, end_to_end),
        (7, "ordering ablation", 300.0, ablation),
        (8, "clustering", 20.0, clustering),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1}s, budget {budget}s")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}, {elapsed:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}, {elapsed:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
