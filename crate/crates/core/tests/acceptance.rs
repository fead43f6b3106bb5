//! Acceptance gate: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ecif::contrastive::{
    batch_loss, i2t_col, neg_term, objective_grad, objective_value, removed_negative_loss, t2i_row, total_loss,
    zeta_weighted_loss, NegVariant, Objective,
};
use ecif::data::{
    generate_synthetic, locate, make_segmentation, save_jsonl, BatchedData, PairedDataset, Provenance, Seg, SyntheticConfig,
};
use ecif::influence::{
    edit_params, logra_project, symmetry_defect, Curvature, HessianSpec, InfluenceEngine, InfluenceVectors, ProjectionPair,
};
use ecif::model::{Architecture, Encoder, EncoderConfig};
use ecif::numerics::{cg_solve, finite_diff_grad, ls_slope, norm, spectral_norm_symmetric, sub, CgConfig, DetRng, Matrix};
use ecif::oracle::{
    bound_eval, estimate_constants, retrain_removed, train, BoundConstants, ProbeConfig, RetrainMode, TrainConfig,
};
use ecif::workflow::{
    mispredicted, prepare, replay, run_job, DataSource, Format, Job, ModelSource, RetrainStart, SegSource, Setup, SweepMode,
    TestSet, VerifyOptions, MANIFEST_FILE,
};
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut DetRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

struct Instance {
    enc: Encoder,
    data: BatchedData,
    index: Seg,
    theta: Vec<f64>,
}

fn instance(arch: Architecture, seed: u64) -> Instance {
    let ds = generate_synthetic(&SyntheticConfig {
        n: 12,
        d_t: 4,
        d_i: 3,
        latent_dim: 2,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let seg = make_segmentation(&ds, 4, seed).unwrap();
    let data = BatchedData::new(&ds, &seg).unwrap();
    let index = locate(&ds, &seg, &[seed % 12, (seed + 5) % 12, (seed + 7) % 12]).unwrap();
    let enc = Encoder::new(EncoderConfig {
        architecture: arch,
        bias: seed.is_multiple_of(2),
        ..EncoderConfig::linear(4, 3, 3)
    })
    .unwrap();
    let mut rng = DetRng::new(seed + 1000);
    let theta = (0..enc.num_params()).map(|_| 0.3 * rng.normal()).collect();
    Instance { enc, data, index, theta }
}

fn criterion_1() -> Outcome {
    let mut rng = DetRng::new(1);
    let mut worst_decomp = 0.0f64;
    for n in 1..=16 {
        for _ in 0..4 {
            let s = random_matrix(n, n, &mut rng) * 3.0;
            let parts: f64 = (0..n).map(|i| t2i_row(&s, i).unwrap() + i2t_col(&s, i).unwrap()).sum();
            worst_decomp = worst_decomp.max((batch_loss(&s) - parts).abs());
        }
    }
    let single = batch_loss(&Matrix::from_element(1, 1, 2.7));

    let mut zeta_one_exact = true;
    let mut zeta_zero_gap = 0.0f64;
    let mut edit_identity = true;
    for seed in 0..10 {
        let ins = instance(Architecture::Linear, seed);
        let touched = BatchedData {
            batches: ins.index.entries.iter().map(|e| ins.data.batches[e.batch].clone()).collect(),
            segmentation: ins.data.segmentation.clone(),
        };
        let z1 = zeta_weighted_loss(&ins.enc, &ins.theta, &ins.data, &ins.index, 1.0).unwrap();
        let full: f64 = touched
            .batches
            .iter()
            .map(|b| batch_loss(&ins.enc.similarity_matrix(&ins.theta, b).unwrap()))
            .sum();
        zeta_one_exact &= z1 == full;
        let z0 = zeta_weighted_loss(&ins.enc, &ins.theta, &ins.data, &ins.index, 0.0).unwrap();
        let r = removed_negative_loss(&ins.enc, &ins.theta, &ins.data, &ins.index).unwrap();
        zeta_zero_gap = zeta_zero_gap.max((z0 - r).abs() / r.abs().max(1.0));

        let p = ins.theta.len();
        let iv = InfluenceVectors {
            pos_if: rng.normal_vec(p),
            neg_if: rng.normal_vec(p),
            ..InfluenceVectors::zeros(p, NegVariant::FirstOrder, 1.0)
        };
        let edited = edit_params(&ins.theta, &iv, 0.0, 1.0).unwrap();
        edit_identity &= edited.iter().zip(&ins.theta).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let mut worst_kron = 0.0f64;
    for _ in 0..50 {
        let dim = |rng: &mut DetRng, lo: usize, hi: usize| lo + (rng.uniform() * (hi - lo + 1) as f64) as usize % (hi - lo + 1);
        let (d_in, d_out) = (dim(&mut rng, 1, 6), dim(&mut rng, 1, 6));
        let (r_i, r_o) = (dim(&mut rng, 1, d_in), dim(&mut rng, 1, d_out));
        let t = dim(&mut rng, 1, 5);
        let proj = ProjectionPair::new(random_matrix(r_i, d_in, &mut rng), random_matrix(r_o, d_out, &mut rng)).unwrap();
        let xs: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d_in)).collect();
        let gs: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d_out)).collect();
        let mut outer = nalgebra::DVector::zeros(d_in * d_out);
        for (x, g) in xs.iter().zip(&gs) {
            for i in 0..d_in {
                for j in 0..d_out {
                    outer[i * d_out + j] += x[i] * g[j];
                }
            }
        }
        let direct = proj.p_i.kronecker(&proj.p_o) * outer;
        let fast = logra_project(&xs, &gs, &proj).unwrap();
        let err = direct.iter().zip(&fast).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_kron = worst_kron.max(err);
    }

    check(
        worst_decomp <= 1e-12 && single == 0.0 && zeta_one_exact && zeta_zero_gap <= 1e-12 && edit_identity && worst_kron <= 1e-12,
        format!(
            "decomposition {worst_decomp:.1e}, 1x1 loss {single}, zeta(1) exact {zeta_one_exact}, zeta(0) gap {zeta_zero_gap:.1e}, edit identity {edit_identity}, kronecker {worst_kron:.1e}"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst_grad = 0.0f64;
    let mut worst_zeta = 0.0f64;
    for seed in 0..20u64 {
        let arch = if seed % 2 == 0 { Architecture::Linear } else { Architecture::Tanh { hidden: 4 } };
        let ins = instance(arch, seed);
        let objectives = [
            Objective::total(0.5),
            Objective::pos(ins.index.clone()),
            Objective::neg(ins.index.clone(), NegVariant::FirstOrder),
            Objective::neg(ins.index.clone(), NegVariant::Paper),
        ];
        for obj in &objectives {
            let analytic = objective_grad(&ins.enc, &ins.theta, &ins.data, obj).unwrap();
            let fd = finite_diff_grad(|t| objective_value(&ins.enc, t, &ins.data, obj), &ins.theta, 1e-6).unwrap();
            worst_grad = worst_grad.max(norm(&sub(&analytic, &fd)) / norm(&fd).max(1e-8));
        }
        let h = 1e-4;
        let z = |zeta: f64| zeta_weighted_loss(&ins.enc, &ins.theta, &ins.data, &ins.index, zeta).unwrap();
        let d = (z(1.0 + h) - z(1.0 - h)) / (2.0 * h);
        let neg = neg_term(&ins.enc, &ins.theta, &ins.data, &ins.index, NegVariant::FirstOrder).unwrap();
        worst_zeta = worst_zeta.max((d - neg).abs() / neg.abs().max(1e-12));
    }

    let ins = instance(Architecture::Linear, 3);
    let base = zeta_weighted_loss(&ins.enc, &ins.theta, &ins.data, &ins.index, 1.0).unwrap();
    let neg = neg_term(&ins.enc, &ins.theta, &ins.data, &ins.index, NegVariant::FirstOrder).unwrap();
    let pts: Vec<(f64, f64)> = [0.9, 0.95, 0.99, 0.995, 0.999]
        .iter()
        .map(|&zeta| {
            let z = zeta_weighted_loss(&ins.enc, &ins.theta, &ins.data, &ins.index, zeta).unwrap();
            ((1.0 - zeta).ln(), (z - base - (zeta - 1.0) * neg).abs().ln())
        })
        .collect();
    let slope = ls_slope(&pts);
    check(
        worst_grad <= 1e-5 && worst_zeta <= 1e-6 && (slope - 2.0).abs() <= 0.1,
        format!("gradient rel err {worst_grad:.1e}, d/dzeta rel err {worst_zeta:.1e}, remainder slope {slope:.3}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = DetRng::new(3);
    let mut worst_cg = 0.0f64;
    for p in [1usize, 5, 20, 50, 100, 200] {
        let b = random_matrix(p, p, &mut rng);
        let a = b.transpose() * &b / p as f64 + Matrix::identity(p, p);
        let rhs = rng.normal_vec(p);
        let cfg = CgConfig { tol: 1e-10, ..CgConfig::default() };
        let x = cg_solve(|v: &[f64]| Ok((&a * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec()), &rhs, &cfg)
            .unwrap()
            .x;
        let dense = a.clone().cholesky().unwrap().solve(&nalgebra::DVector::from_column_slice(&rhs));
        let diff: Vec<f64> = x.iter().zip(dense.iter()).map(|(u, v)| u - v).collect();
        worst_cg = worst_cg.max(norm(&diff) / dense.norm());
    }

    let mut worst_hvp = 0.0f64;
    let mut worst_sym = 0.0f64;
    for (arch, seed) in [(Architecture::Linear, 4), (Architecture::Tanh { hidden: 3 }, 5)] {
        let ins = instance(arch, seed);
        let spec = HessianSpec::with_delta(0.5);
        let curv = Curvature::total(&ins.enc, &ins.theta, &ins.data, &spec).unwrap();
        let p = ins.theta.len();
        let f = |t: &[f64]| total_loss(&ins.enc, t, &ins.data, 0.5).unwrap();
        let h = 1e-3;
        let mut oracle = Matrix::zeros(p, p);
        for i in 0..p {
            for j in i..p {
                let at = |si: f64, sj: f64| {
                    let mut t = ins.theta.clone();
                    t[i] += si * h;
                    t[j] += sj * h;
                    f(&t)
                };
                let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
                oracle[(i, j)] = v;
                oracle[(j, i)] = v;
            }
        }
        for _ in 0..5 {
            let v = rng.normal_vec(p);
            let hv = curv.hvp(&v).unwrap();
            let expect = &oracle * nalgebra::DVector::from_column_slice(&v);
            let diff: Vec<f64> = hv.iter().zip(expect.iter()).map(|(a, b)| a - b).collect();
            worst_hvp = worst_hvp.max(norm(&diff) / expect.norm());
            let u = rng.normal_vec(p);
            let scale = norm(&u) * norm(&v) * spectral_norm_symmetric(&oracle);
            worst_sym = worst_sym.max(symmetry_defect(&curv, &u, &v).unwrap().abs() / scale);
        }
    }
    check(
        worst_cg <= 1e-6 && worst_hvp <= 1e-4 && worst_sym <= 1e-6,
        format!("cg vs dense {worst_cg:.1e}, hvp vs dense {worst_hvp:.1e}, symmetry {worst_sym:.1e}"),
    )
}

fn synthetic_setup(n: usize, misalign: f64, seed: u64) -> Setup {
    Setup {
        data: DataSource::Synthetic {
            config: SyntheticConfig {
                n,
                misalign_ratio: misalign,
                seed,
                ..SyntheticConfig::default()
            },
        },
        segmentation: SegSource::Shuffled { batch_size: 8, seed },
        model: ModelSource::Fit {
            encoder: EncoderConfig::linear(8, 8, 4),
        },
        train: TrainConfig::default(),
    }
}

fn validation_for(setup: &Setup, n: usize) -> TestSet {
    let DataSource::Synthetic { config } = &setup.data else { unreachable!() };
    TestSet {
        data: DataSource::Synthetic {
            config: config.validation_split(n),
        },
        batch_size: 8,
        seed: 0,
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn run(job: &Job, dir: &Path, runs: &mut Vec<PathBuf>) -> Result<(), String> {
    std::fs::create_dir_all(dir).unwrap();
    run_job(job, dir).map_err(|e| e.to_string())?;
    runs.push(dir.to_path_buf());
    Ok(())
}

/// Criteria 4 and 5 share one verify run.
fn criteria_4_5(root: &Path, runs: &mut Vec<PathBuf>) -> (Outcome, Outcome) {
    let setup = synthetic_setup(64, 0.0, 0);
    let job = Job::Verify {
        test: Some(validation_for(&setup, 40)),
        setup,
        removals: (0..20u64).map(|i| vec![i * 3]).collect(),
        variants: NegVariant::ALL.to_vec(),
        hessian: HessianSpec::with_delta(1.0),
        options: VerifyOptions {
            start: RetrainStart::Cold,
            decomposition: false,
            bound: None,
        },
    };
    let dir = root.join("c4");
    if let Err(e) = run(&job, &dir, runs) {
        return (Err(e.clone()), Err(e));
    }
    let report = read_json(&dir.join("verify.json"));
    let summary = report["summary"].as_array().unwrap();
    let get = |s: &Value, k: &str| s[k].as_f64().unwrap_or(f64::NAN);
    let best = summary
        .iter()
        .max_by(|a, b| get(a, "median_cosine").total_cmp(&get(b, "median_cosine")))
        .unwrap();
    let all: Vec<String> = summary
        .iter()
        .map(|s| {
            format!(
                "{} cos {:.4} rel {:.4} spearman {:.4}",
                s["variant"].as_str().unwrap(),
                get(s, "median_cosine"),
                get(s, "median_relative_error"),
                get(s, "spearman")
            )
        })
        .collect();
    let chosen = best["variant"].as_str().unwrap().to_string();
    let (cos, rel, rho) = (get(best, "median_cosine"), get(best, "median_relative_error"), get(best, "spearman"));
    (
        check(cos >= 0.8 && rel <= 0.5, format!("using {chosen}: {}", all.join("; "))),
        check(rho >= 0.8, format!("{chosen} spearman {rho:.4} over 20 removals")),
    )
}

fn criterion_6(root: &Path, runs: &mut Vec<PathBuf>) -> Outcome {
    let mut precisions = vec![];
    for seed in 0..3u64 {
        let setup = synthetic_setup(200, 0.2, seed);
        let job = Job::Detect {
            validation: Some(validation_for(&setup, 40)),
            setup,
            self_mode: false,
            variant: NegVariant::FirstOrder,
            hessian: HessianSpec::with_delta(1.0),
            format: Format::Csv,
        };
        let dir = root.join(format!("c6_{seed}"));
        run(&job, &dir, runs)?;
        let report = read_json(&dir.join("detect_metrics.json"));
        let task = report["metrics"]
            .as_array()
            .unwrap()
            .iter()
            .find(|m| m["kind"] == "task_is")
            .ok_or("no task-IS metrics")?;
        let at20 = task["precision"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["k"] == 20)
            .ok_or("no precision@20")?;
        precisions.push(at20["precision"].as_f64().unwrap());
    }
    let mean = precisions.iter().sum::<f64>() / precisions.len() as f64;
    check(mean >= 0.5, format!("precision@20 per seed {precisions:?}, mean {mean:.3} (random 0.2)"))
}

fn criterion_7(root: &Path, runs: &mut Vec<PathBuf>) -> Outcome {
    let mut wins = 0;
    let mut lines = vec![];
    for seed in 0..5u64 {
        let setup = synthetic_setup(64, 0.0, seed);
        let job = Job::Sweep {
            test: validation_for(&setup, 40),
            setup,
            fractions: vec![0.1],
            modes: vec![SweepMode::Valuable, SweepMode::Random],
            seeds: vec![seed],
            variant: NegVariant::FirstOrder,
            hessian: HessianSpec::with_delta(1.0),
            start: RetrainStart::Cold,
            format: Format::Json,
        };
        let dir = root.join(format!("c7_{seed}"));
        run(&job, &dir, runs)?;
        let rows = read_json(&dir.join("sweep.json"));
        let loss = |mode: &str| {
            rows.as_array()
                .unwrap()
                .iter()
                .find(|r| r["mode"] == mode)
                .and_then(|r| r["test_loss"].as_f64())
                .unwrap()
        };
        let (v, r) = (loss("valuable"), loss("random"));
        if v > r {
            wins += 1;
        }
        lines.push(format!("{v:.4}>{r:.4}"));
    }
    check(wins >= 4, format!("valuable > random in {wins}/5 seeds [{}]", lines.join(", ")))
}

fn criterion_8(root: &Path, runs: &mut Vec<PathBuf>) -> Outcome {
    const PROBE_ID: u64 = 5_000_000;
    let mut hits = 0;
    let mut lines = vec![];
    for seed in 0..5u64 {
        let setup = synthetic_setup(64, 0.2, seed);
        let p = prepare(&setup).map_err(|e| e.to_string())?;
        let DataSource::Synthetic { config } = &setup.data else { unreachable!() };
        let clean = generate_synthetic(&config.validation_split(7)).unwrap();
        let dir = root.join(format!("c8_{seed}"));
        std::fs::create_dir_all(&dir).unwrap();

        // first misaligned training pair that the model gets wrong as a probe
        let mut chosen = None;
        for cand in p.ds.misaligned_ids() {
            let mut probe = p.ds.get(cand).unwrap().clone();
            probe.id = PROBE_ID;
            let mut pairs = vec![probe];
            pairs.extend(clean.pairs().iter().cloned());
            let test = PairedDataset::new(8, 8, pairs, Provenance::Derived("probe".into())).unwrap();
            let seg = make_segmentation(&test, 8, 0).unwrap();
            let batched = BatchedData::new(&test, &seg).unwrap();
            let wrong = mispredicted(&p.enc, &p.theta, &batched).unwrap();
            let emb = p.enc.forward(&p.theta, &batched.batches[0]).unwrap();
            let row = batched.batches[0].ids.iter().position(|&id| id == PROBE_ID).unwrap();
            let positive = emb.unit_text().row(row).dot(&emb.unit_image().row(row)) > 0.0;
            if wrong.contains(&PROBE_ID) && positive {
                chosen = Some((cand, test));
                break;
            }
        }
        let Some((cand, test)) = chosen else {
            lines.push(format!("seed {seed}: no eligible probe"));
            continue;
        };
        let probe_file = dir.join("probe.jsonl");
        save_jsonl(&test, &probe_file).unwrap();
        let job = Job::Traceback {
            setup,
            test: TestSet {
                data: DataSource::File { path: probe_file },
                batch_size: 8,
                seed: 0,
            },
            pair: PROBE_ID,
            k: 3,
            variant: NegVariant::FirstOrder,
            hessian: HessianSpec::with_delta(1.0),
            format: Format::Csv,
        };
        run(&job, &dir, runs)?;
        let top: Vec<u64> = read_json(&dir.join("traceback_report.json"))["top"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        let rank = top.iter().position(|&id| id == cand);
        if rank.is_some() {
            hits += 1;
        }
        lines.push(format!("seed {seed}: pair {cand} rank {}", rank.map_or("-".into(), |r| r.to_string())));
    }
    check(hits >= 4, format!("in top-3 for {hits}/5 seeds [{}]", lines.join("; ")))
}

fn criterion_9() -> Outcome {
    // (C'_L, C_H, C'_H, σ, σ', δ, n, M) and the value worked out by hand
    type Constants = (f64, f64, f64, f64, f64, f64, usize, usize);
    let cases: [(Constants, f64); 5] = [
        ((2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3, 4), 6.0),
        ((1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1, 1), 3.0),
        ((1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2, 1), 3.0),
        ((0.5, 1.0, 2.0, 0.0, 1.0, 2.0, 1, 2), 1.0 / 27.0 + 5.0 / 12.0),
        ((3.0, 0.5, 0.5, -0.5, -0.5, 1.5, 1, 4), 0.5 * 2.5 * 9.0 / 2.0 + 6.0),
    ];
    let mut worst = 0.0f64;
    for ((cl, ch, chp, s, sp, d, n, m), expect) in cases {
        let got = bound_eval(&BoundConstants::new(cl, ch, chp, s, sp, d, n, m)).unwrap();
        worst = worst.max((got - expect).abs());
    }

    let ds = generate_synthetic(&SyntheticConfig {
        n: 16,
        d_t: 4,
        d_i: 4,
        latent_dim: 2,
        seed: 9,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let seg = make_segmentation(&ds, 4, 9).unwrap();
    let data = BatchedData::new(&ds, &seg).unwrap();
    let enc = Encoder::new(EncoderConfig::linear(4, 4, 2)).unwrap();
    let p = enc.num_params();
    let removed = [3u64, 10];
    let index = locate(&ds, &seg, &removed).unwrap();
    let cfg = TrainConfig { delta: 1.0, ..TrainConfig::default() };
    let theta0 = train(&enc, &data, &cfg).unwrap().theta;
    let curvature = Curvature::new(&enc, &theta0, &data, &Objective::total(0.0), 0.0, 1e-5)
        .unwrap()
        .dense()
        .unwrap();
    let data_curvature = spectral_norm_symmetric(&curvature.model);
    let base = 100.0 * data_curvature;

    let mut rows = vec![];
    for factor in [1.0, 2.0, 4.0, 8.0] {
        let delta = base * factor;
        let cfg = TrainConfig { delta, ..TrainConfig::default() };
        let theta = train(&enc, &data, &cfg).unwrap().theta;
        let spec = HessianSpec::with_delta(delta);
        let iv = InfluenceEngine::new(&enc, &theta, &data, &spec)
            .unwrap()
            .ecif(&index, NegVariant::FirstOrder)
            .unwrap();
        let theta_if = edit_params(&theta, &iv, -1.0, 0.0).unwrap();
        let warm = TrainConfig {
            init: ecif::oracle::Init::Warm { theta: theta.clone() },
            ..cfg.clone()
        };
        let surrogate = retrain_removed(&enc, &ds, &seg, &removed, &warm, RetrainMode::Surrogate { variant: NegVariant::FirstOrder })
            .unwrap()
            .theta;
        let err = norm(&sub(&theta_if, &surrogate));
        let bc = estimate_constants(&enc, &theta, &data, &index, NegVariant::FirstOrder, delta, &ProbeConfig::default(), 1e-5).unwrap();
        rows.push((delta, err, bound_eval(&bc).unwrap()));
    }
    let decreasing = rows.windows(2).all(|w| w[1].1 < w[0].1 && w[1].2 < w[0].2);
    let table: Vec<String> = rows.iter().map(|(d, e, b)| format!("delta {d:.3e}: error {e:.3e} bound {b:.3e}")).collect();
    check(
        worst <= 1e-12 && decreasing && p <= 60,
        format!("hand-computed max gap {worst:.1e}; p={p}; {}", table.join("; ")),
    )
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != MANIFEST_FILE)
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn criterion_10(root: &Path, runs: &[PathBuf]) -> Outcome {
    let mut mismatched = vec![];
    let mut compared = 0;
    for dir in runs {
        let again = root.join("replay").join(dir.file_name().unwrap());
        std::fs::create_dir_all(&again).unwrap();
        replay(&dir.join(MANIFEST_FILE), &again).map_err(|e| e.to_string())?;
        let (a, b) = (files(dir), files(&again));
        for (name, bytes) in &b {
            compared += 1;
            if a.get(name) != Some(bytes) {
                mismatched.push(format!("{}/{name}", dir.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    check(
        mismatched.is_empty() && !runs.is_empty(),
        format!("{} runs, {compared} files compared, mismatches {mismatched:?}", runs.len()),
    )
}

fn report(n: usize, outcome: &Outcome, took: Duration) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2}: {tag} ({:.1}s) {detail}", took.as_secs_f64());
    outcome.is_ok()
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut runs = vec![];
    let mut all = true;

    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3)] {
        let t = Instant::now();
        let out = f();
        all &= report(n, &out, t.elapsed());
    }

    let t = Instant::now();
    let (c4, c5) = criteria_4_5(root.path(), &mut runs);
    let took = t.elapsed();
    all &= report(4, &c4, took);
    all &= report(5, &c5, took);

    type Stage = fn(&Path, &mut Vec<PathBuf>) -> Outcome;
    for (n, f) in [(6, criterion_6 as Stage), (7, criterion_7), (8, criterion_8)] {
        let t = Instant::now();
        let out = f(root.path(), &mut runs);
        all &= report(n, &out, t.elapsed());
    }

    let t = Instant::now();
    all &= report(9, &criterion_9(), t.elapsed());
    let t = Instant::now();
    all &= report(10, &criterion_10(root.path(), &runs), t.elapsed());

    if !all {
        std::process::exit(1);
    }
}
