//! Acceptance suite. Each test checks one criterion at its stated tolerance
//! and prints a single `criterion <n> ... PASS|FAIL` line.
//!
//! Run alone with `cargo test --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use gca::autodiff::{finite_diff_check_many, Tape};
use gca::data::{
    generate_domains, prepare_domain, sample_structures, zscore_normalize, DomainConfig, GroundTruth, NoiseParam,
    Series, TimeSeriesWindow,
};
use gca::data::io::read_json;
use gca::metrics::{auprc, evaluate};
use gca::model::network::{self, Batch};
use gca::model::{
    encode_with, one_step_predict, ModelConfig, ModelKind, ModelParams, Sampling, StructureNoise, SummaryGraph,
};
use gca::objectives::{
    alignment_loss, bernoulli_kl, strengthen_loss, tape_structure_kl, tape_total_loss, total_loss_with_grad, Hyper,
    LossBatches, LossNoise, LossSettings,
};
use gca::trainer::{adam_step, train, validation_mse, Checkpoint, Mode, OptimizerState, TrainConfig, TrainData};
use rand::Rng;

fn report(n: u32, what: &str, pass: bool, detail: &str) {
    println!("criterion {n} ({what}): {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn windows(vars: usize, lag: usize, len: usize, history: usize, seed: u64) -> (Vec<TimeSeriesWindow>, Vec<TimeSeriesWindow>) {
    let mut rng = common::rng(seed);
    let s = sample_structures(vars, lag, 0.4, 1.0, &mut rng).unwrap();
    let cfgs = [DomainConfig::preset(1).unwrap(), DomainConfig::preset(2).unwrap()];
    let series = generate_domains(&s, &cfgs, len, false, &mut rng).unwrap();
    let spec = gca::data::WindowSpec {
        history_len: history,
        horizon: 3,
        stride: 3,
        ratios: Default::default(),
    };
    let a = prepare_domain(&series[0], 1, &spec).unwrap();
    let b = prepare_domain(&series[1], 2, &spec).unwrap();
    (a.train.windows, b.train.windows)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let params = ModelParams::init(ModelConfig::new(ModelKind::Gca, 3, 2, vec![1, 2]), &mut common::rng(seed)).unwrap();
        let (src, tgt) = windows(3, 2, 200, 12, 1000 + seed);
        let s: Vec<&TimeSeriesWindow> = src[..3].iter().collect();
        let lt: Vec<&TimeSeriesWindow> = tgt[..2].iter().collect();
        let at: Vec<&TimeSeriesWindow> = tgt[..4].iter().collect();
        let batches = LossBatches {
            source: &s,
            labeled_target: &lt,
            all_target: &at,
        };
        let noise = LossNoise::draw(&batches, &params, &mut common::rng(seed + 77));
        let settings = LossSettings {
            hyper: Hyper {
                gamma: 1.0,
                delta: 0.5,
                lambda: 1.0,
            },
            temperature: 0.7,
            n_predict: 4,
            horizon: 3,
            target_var: 1,
            unlabeled_target_elbo: false,
        };
        let err = finite_diff_check_many(
            |_tape, vars| {
                let bound = params.bind_with(vars.to_vec())?;
                tape_total_loss(&bound, &batches, &settings, &noise).map(|(t, _)| t)
            },
            params.tensors(),
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    report(1, "gradient correctness", pass, &format!("max rel err {worst:.2e} over 20 seeds in {elapsed:.1?}"));
    assert!(pass);
}

#[test]
fn criterion_2_closed_form_oracles() {
    let kl = bernoulli_kl(0.9, 0.1);
    let s = SummaryGraph {
        vars: 2,
        matrix: vec![1.0, 0.0, 0.0, 0.0],
    };
    let t = SummaryGraph {
        vars: 2,
        matrix: vec![0.0; 4],
    };
    let align = alignment_loss(&s, &t).unwrap();
    let strengthen = strengthen_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
    let ap = auprc(&[0.9, 0.1, 0.8, 0.05], &[true, true, false, false]).unwrap();
    let ap_rev = auprc(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]).unwrap();
    let pass = (kl - 1.7578).abs() < 1e-4
        && align == 0.25
        && strengthen == 2.5
        && (ap - 5.0 / 6.0).abs() < 1e-9
        && (ap_rev - 5.0 / 12.0).abs() < 1e-9;
    report(
        2,
        "closed-form oracles",
        pass,
        &format!("kl={kl:.6} align={align} strengthen={strengthen} ap={ap:.10} ap_rev={ap_rev:.10}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_structure_recovery() {
    let start = Instant::now();
    let mut rng = common::rng(7);
    let structures = sample_structures(5, 2, 0.3, 1.0, &mut rng).unwrap();
    let domain = DomainConfig {
        domain_id: 1,
        noise: 0.5,
        sample_interval: 1,
        nonlinearity_c: 0.0,
        noise_param: NoiseParam::StdDev,
    };
    let series = generate_domains(&structures, &[domain], 10_000, false, &mut rng).unwrap().remove(0);
    let truth = GroundTruth::from_structures(&structures).unwrap();
    let config = TrainConfig {
        max_lag: 2,
        epochs: 100,
        learning_rate: 3e-3,
        n_predict: 20,
        seed: 1,
        save_every_epoch: false,
        ..TrainConfig::default()
    };
    let d = prepare_domain(&series, 1, &config.window_spec()).unwrap();
    let data = TrainData {
        source: d.train.clone(),
        target: d.train,
        target_val: d.val,
    };
    let out = train(&data, &config, None, &mut |_| {}).unwrap();
    let r = evaluate(&out.last, &d.test, Some(&truth), 0, gca::metrics::worker_threads()).unwrap();
    let score = r.auprc.unwrap();
    let elapsed = start.elapsed();
    let pass = score >= 0.90 && elapsed < Duration::from_secs(600);
    report(
        3,
        "structure recovery",
        pass,
        &format!(
            "lag-resolved AUPRC {score:.4} (summary {:.4}) after {} epochs in {elapsed:.1?}",
            r.auprc_summary.unwrap(),
            out.epochs.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_transfer_ordering() {
    let start = Instant::now();
    let modes = [Mode::Gca, Mode::GcaR, Mode::Baseline];
    let mut mse = [0.0f64; 3];
    for seed in 0..3u64 {
        let mut rng = common::rng(100 + seed);
        let structures = sample_structures(5, 2, 0.3, 1.0, &mut rng).unwrap();
        let cfgs = [DomainConfig::preset(1).unwrap(), DomainConfig::preset(2).unwrap()];
        let series = generate_domains(&structures, &cfgs, 5000, false, &mut rng).unwrap();
        for (slot, &mode) in modes.iter().enumerate() {
            let config = TrainConfig {
                mode,
                max_lag: 2,
                epochs: 40,
                learning_rate: 3e-3,
                n_predict: 20,
                gamma: 100.0,
                prior_edge_prob: 0.3,
                labeled_fraction: 0.05,
                seed,
                save_every_epoch: false,
                ..TrainConfig::default()
            };
            let a = prepare_domain(&series[0], 1, &config.window_spec()).unwrap();
            let b = prepare_domain(&series[1], 2, &config.window_spec()).unwrap();
            let data = TrainData {
                source: a.train,
                target: b.train,
                target_val: b.val,
            };
            let out = train(&data, &config, None, &mut |_| {}).unwrap();
            let r = evaluate(&out.best.model, &b.test, None, 0, gca::metrics::worker_threads()).unwrap();
            mse[slot] += r.mse / 3.0;
        }
    }
    let [gca, gca_r, base] = mse;
    let gain = 1.0 - gca / base;
    let elapsed = start.elapsed();
    let pass = gca < gca_r && gca < base && gain >= 0.03 && elapsed < Duration::from_secs(1800);
    report(
        4,
        "transfer ordering 1->2",
        pass,
        &format!(
            "mean target-test MSE gca={gca:.4} gca_r={gca_r:.4} baseline={base:.4}, gain over baseline {:.1}% in {elapsed:.1?}",
            100.0 * gain
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_elbo_sanity() {
    let (src, _) = windows(3, 2, 600, 12, 5);
    let mut params = ModelParams::init(ModelConfig::new(ModelKind::Gca, 3, 2, vec![1, 2]), &mut common::rng(5)).unwrap();
    let p0 = params.config().prior_edge_prob;
    let settings = LossSettings {
        hyper: Hyper {
            gamma: 0.0,
            delta: 0.0,
            lambda: 0.0,
        },
        temperature: 1.0,
        n_predict: 6,
        horizon: 3,
        target_var: 0,
        unlabeled_target_elbo: false,
    };
    let names = params.names().to_vec();
    let mut opt = OptimizerState::new(params.tensors());
    let mut rng = common::rng(6);
    let mut min_kl = f64::INFINITY;
    for step in 0..60 {
        let chunk: Vec<&TimeSeriesWindow> = src.iter().cycle().skip(step * 8).take(8).collect();
        let batches = LossBatches {
            source: &chunk,
            labeled_target: &[],
            all_target: &chunk,
        };
        let noise = LossNoise::draw(&batches, &params, &mut rng);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let batch = Batch::from_windows(&chunk).unwrap();
        let st = network::encode(
            &bound,
            &batch,
            1,
            Sampling::Relaxed {
                temperature: 1.0,
                noise: &noise.source,
            },
        )
        .unwrap();
        min_kl = min_kl.min(tape_structure_kl(&st.logits, p0).unwrap().item().unwrap());
        let (_, grads) = total_loss_with_grad(&batches, &params, &settings, &noise).unwrap();
        adam_step(params.tensors_mut(), &names, &grads, &mut opt, 1e-2).unwrap();
    }

    // Every logit at the prior's logit: the encoder output is its bias alone.
    let prior_logit = (p0 / (1.0 - p0)).ln();
    for j in 1..=2 {
        params.get_mut(&format!("encoder.{j}.w_out")).unwrap().values_mut().fill(0.0);
        params.get_mut(&format!("encoder.{j}.b_out")).unwrap().values_mut().fill(prior_logit);
    }
    let chunk: Vec<&TimeSeriesWindow> = src[..8].iter().collect();
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let noise = StructureNoise::draw(8, 3, 2, &mut rng);
    let st = network::encode(
        &bound,
        &Batch::from_windows(&chunk).unwrap(),
        1,
        Sampling::Relaxed {
            temperature: 1.0,
            noise: &noise,
        },
    )
    .unwrap();
    let at_prior = tape_structure_kl(&st.logits, p0).unwrap().item().unwrap();
    let pass = min_kl >= 0.0 && at_prior.abs() < 1e-9;
    report(5, "ELBO sanity", pass, &format!("min KL over 60 steps {min_kl:.4e}, KL at prior {at_prior:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_6_masking_soundness() {
    let mut rng = common::rng(60);
    let mut pass = true;
    let mut checked = 0;
    for case in 0..50u64 {
        let (m, k) = (rng.random_range(2..6usize), rng.random_range(1..4usize));
        let t = k + rng.random_range(0..6usize);
        let params = ModelParams::init(ModelConfig::new(ModelKind::Gca, m, k, vec![1]), &mut common::rng(case)).unwrap();
        let history: Vec<f64> = (0..t * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut graph = encode_with(&history, 1, &params, Sampling::Expected).unwrap();
        let (i, src) = (rng.random_range(0..m), rng.random_range(0..m));
        for j in 0..k {
            graph.samples[j * m * m + i * m + src] = 0.0;
        }
        let base = one_step_predict(&history, &graph, 1, &params).unwrap();
        for _ in 0..5 {
            let scale = 10f64.powi(rng.random_range(-3..7));
            let mut moved = history.clone();
            for row in 0..t {
                moved[row * m + src] += scale * rng.random_range(-1.0..1.0);
            }
            let after = one_step_predict(&moved, &graph, 1, &params).unwrap();
            pass &= after[i] == base[i];
            checked += 1;
        }
    }
    report(6, "masking soundness", pass, &format!("{checked} perturbations, target change exactly 0"));
    assert!(pass);
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_gca");
    let data = tmp.path().join("data");
    let run_cmd = |args: Vec<String>| {
        let out = std::process::Command::new(bin).args(&args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let d = data.to_str().unwrap();
    run_cmd(s(&["generate", "--vars", "4", "--lag", "2", "--length", "800", "--domains", "1,2", "--seed", "11", "--out", d]));
    let mut histories = Vec::new();
    let mut evals = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        let r = run.to_str().unwrap();
        run_cmd(s(&[
            "train", "--data", d, "--out", r, "--max-lag", "2", "--window", "16", "--horizon", "4", "--epochs", "3",
            "--batch-size", "32", "--max-steps-per-epoch", "6", "--seed", "3",
        ]));
        histories.push(common::read(&run.join("history.csv")));
        let model = run.join("best.json");
        evals.push(run_cmd(s(&["eval", "--model", model.to_str().unwrap(), "--data", d])));
    }
    let identical = histories[0] == histories[1] && evals[0] == evals[1];

    let run = tmp.path().join("a");
    let best: Checkpoint = read_json(&run.join("best.json")).unwrap();
    let cfg = &best.train_config;
    let series = gca::cli::load_series(&data, best.target_domain).unwrap();
    let splits = gca::data::prepare_with_stats(
        &series,
        best.target_domain,
        &cfg.window_spec(),
        best.stats_for(best.target_domain).unwrap().clone(),
    )
    .unwrap();
    let reloaded = validation_mse(&best.model, &splits.val, cfg.target_var).unwrap();
    let diff = (reloaded - best.val_mse).abs();
    let pass = identical && diff <= 1e-9;
    report(
        7,
        "determinism and persistence",
        pass,
        &format!("history.csv identical: {identical}, checkpoint val MSE diff {diff:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_normalization_invariants() {
    let mut rng = common::rng(80);
    let mut worst_moment = 0.0f64;
    let mut worst_round = 0.0f64;
    for _ in 0..50 {
        let (len, m) = (rng.random_range(2..400usize), rng.random_range(1..6usize));
        let scale = 10f64.powi(rng.random_range(-3..5));
        let offset = rng.random_range(-1e3..1e3);
        let values: Vec<f64> = (0..len * m).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        let s = Series::new(m, values.clone()).unwrap();
        let Ok((z, stats)) = zscore_normalize(&s) else { continue };
        for v in 0..m {
            let col = z.column(v);
            let mean = col.iter().sum::<f64>() / len as f64;
            let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
            worst_moment = worst_moment.max(mean.abs()).max((std - 1.0).abs());
        }
        let back = stats.denormalize(&z).unwrap();
        for (a, b) in back.values().iter().zip(&values) {
            worst_round = worst_round.max((a - b).abs());
        }
    }
    let pass = worst_moment < 1e-9 && worst_round < 1e-9;
    report(
        8,
        "normalization invariants",
        pass,
        &format!("max moment error {worst_moment:.1e}, max round-trip error {worst_round:.1e}"),
    );
    assert!(pass);
}
