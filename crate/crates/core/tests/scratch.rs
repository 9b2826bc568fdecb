//! Temporary calibration probes (run with --ignored). Deleted before release.

use rtify_core::backbone::{train_bptt, LogitPool, RnnParams, TrainSchedule};
use rtify_core::fitting::{fit_rt, prepare_fixture, rtify_outcomes, summarize_outcomes, FitRtConfig};
use rtify_core::objectives::HistogramSpec;
use rtify_core::reference::{ddm_reference_by_condition, DdmParams};
use rtify_core::rtify::{ReadoutPolicy, RtTiming, RtifyParams};
use rtify_core::stimuli::{config_grid, make_dataset, Direction, RdmConfig, CANONICAL_COHERENCES};
use rtify_core::wongwang::{ww_run, Drive, WwParams, DEFAULT_S_INIT};
use std::time::Instant;

#[test]
#[ignore]
fn calibrate_backbone() {
    let t0 = Instant::now();
    let base = RdmConfig::default(); // 100 dots, 150 frames
    let dirs = [Direction::RIGHT, Direction::LEFT];
    let configs = config_grid(&base, &CANONICAL_COHERENCES, &dirs);
    let train = make_dataset(&configs, 50, 42, 1).unwrap();
    let eval = make_dataset(&configs, 50, 42, 2).unwrap();
    let warm_configs = config_grid(&base, &[0.999], &dirs);
    let warmup = make_dataset(&warm_configs, 50, 42, 3).unwrap();
    println!("datasets in {:?}", t0.elapsed());

    let mut rnn = RnnParams::init(8, 64, 2, 42);
    let schedule = TrainSchedule {
        epochs: 100,
        warmup_epochs: 10,
        lr: 1e-3,
        post_warmup_lr: 3e-4,
        batch_size: 64,
        pool: LogitPool::Mean,
        grad_clip: None,
        seed: 42,
    };
    let t1 = Instant::now();
    let log = train_bptt(&train, Some(&warmup), None, &mut rnn, &schedule, None).unwrap();
    println!("train 100 epochs in {:?}", t1.elapsed());
    let acc = rtify_core::backbone::accuracy_per_condition(&rnn, &eval, LogitPool::Mean).unwrap();
    println!("final acc per coherence: {acc:?}");
    println!("losses: first {:.4} last {:.4}", log.epochs[0].loss, log.epochs.last().unwrap().loss);
}

#[test]
#[ignore]
fn calibrate_fit() {
    let base = RdmConfig::default();
    let dirs = [Direction::RIGHT, Direction::LEFT];
    let configs = config_grid(&base, &CANONICAL_COHERENCES, &dirs);
    let train = make_dataset(&configs, 50, 42, 1).unwrap();

    let mut rnn = RnnParams::init(8, 64, 2, 42);
    let schedule = TrainSchedule {
        epochs: 60,
        warmup_epochs: 10,
        lr: 1e-3,
        post_warmup_lr: 3e-4,
        batch_size: 64,
        ..Default::default()
    };
    let warm = make_dataset(&config_grid(&base, &[0.999], &dirs), 50, 42, 3).unwrap();
    let t0 = Instant::now();
    train_bptt(&train, Some(&warm), None, &mut rnn, &schedule, None).unwrap();
    println!("backbone in {:?}", t0.elapsed());

    let fixture = prepare_fixture(&rnn, &train).unwrap();
    let ddm = DdmParams::default();
    let reference: Vec<Vec<f32>> =
        ddm_reference_by_condition(&ddm, &CANONICAL_COHERENCES, 2000, 42)
            .unwrap()
            .into_iter()
            .map(|s| s.signed_rts)
            .collect();
    for (i, r) in reference.iter().enumerate() {
        let correct: Vec<f64> = r.iter().filter(|v| **v > 0.0).map(|v| *v as f64).collect();
        let acc = correct.len() as f64 / r.len() as f64;
        let mean = correct.iter().sum::<f64>() / correct.len() as f64;
        println!("ref cond {i}: acc {acc:.3} mean correct rt {mean:.0} ms");
    }

    let spec = HistogramSpec::default();
    let timing = RtTiming::from_frame_rate(75.0, 0.0);
    let mut params = RtifyParams::init(64, 64, 42);
    let cfg = FitRtConfig {
        epochs: 300,
        lr: 0.01,
        ..Default::default()
    };
    let t1 = Instant::now();
    let log = fit_rt(&fixture, &reference, &mut params, &spec, &timing, &cfg).unwrap();
    println!(
        "fit 300 epochs in {:?}; loss {:.6} -> {:.6} (ratio {:.3})",
        t1.elapsed(),
        log.initial_loss(),
        log.final_loss(),
        log.final_loss() / log.initial_loss()
    );

    let outcomes = rtify_outcomes(&fixture, &params, &spec, &timing, ReadoutPolicy::SumToTau).unwrap();
    let metrics = summarize_outcomes(&outcomes, 7, &spec, Some(&reference)).unwrap();
    for c in &metrics.per_condition {
        println!(
            "cond {} coh {:.3}: acc {:.3} mean_tau {:.1} mean_correct_rt {:.0} censored {:.2} mse {:?}",
            c.condition, c.coherence, c.accuracy, c.mean_tau, c.mean_correct_rt_ms,
            c.censored_fraction, c.histogram_mse
        );
    }
}

#[test]
#[ignore]
fn calibrate_ww_sweep() {
    for i0 in [0.378f32, 0.385, 0.392] {
        for jin in [0.02f32, 0.04] {
            println!("== i0 {i0} j_in {jin}");
            let p = WwParams { i0, j_in: jin, ..WwParams::defaults(2) };
            for gap in [0.025f32, 0.1, 0.4, 1.5] {
                let drive = Drive::Static(vec![gap / 2.0, -gap / 2.0]);
                let mut taus = Vec::new();
                let mut wins = 0;
                let n = 200;
                for i in 0..n {
                    let r = ww_run(&p, &drive, 2000, 5000 + i, 0.0, DEFAULT_S_INIT).unwrap();
                    if r.decision.crossed {
                        taus.push(r.decision.tau as f64);
                        if r.decision.choice == Some(0) { wins += 1; }
                    }
                }
                let mean = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
                println!("  gap {gap}: crossed {}/{n} win {:.2} mean tau {mean:.0}",
                    taus.len(), wins as f64 / taus.len().max(1) as f64);
            }
        }
    }
}

#[test]
#[ignore]
fn calibrate_ww() {
    let p = WwParams::defaults(2);
    for gap in [0.5f32, 1.0, 2.0, 4.0] {
        let drive = Drive::Static(vec![gap / 2.0, -gap / 2.0]);
        // zero-noise crossing
        let quiet = WwParams { sigma_noise: 0.0, ..p.clone() };
        let run = ww_run(&quiet, &drive, 3000, 0, 0.0, DEFAULT_S_INIT).unwrap();
        println!(
            "gap {gap}: zero-noise tau {} (crossed {})",
            run.decision.tau, run.decision.crossed
        );
        // noisy winner rate + mean tau
        let mut wins = 0;
        let mut taus = Vec::new();
        let n = 300;
        for i in 0..n {
            let r = ww_run(&p, &drive, 3000, 1000 + i, 0.0, DEFAULT_S_INIT).unwrap();
            if r.decision.crossed && r.decision.choice == Some(0) {
                wins += 1;
            }
            if r.decision.crossed {
                taus.push(r.decision.tau as f64);
            }
        }
        let mean_tau = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
        println!(
            "gap {gap}: winner rate {:.3}, crossings {}, mean tau {mean_tau:.0}",
            wins as f64 / n as f64,
            taus.len()
        );
    }
}

#[test]
#[ignore]
fn calibrate_selfpenalty() {
    use rtify_core::fitting::{train_self_penalty, SelfPenaltyConfig};
    use rtify_core::rtify::init_theta;
    let base = RdmConfig::default();
    let dirs = [Direction::RIGHT, Direction::LEFT];
    let configs = config_grid(&base, &CANONICAL_COHERENCES, &dirs);
    let train = make_dataset(&configs, 50, 42, 1).unwrap();
    let mut rnn = RnnParams::init(8, 64, 2, 42);
    let schedule = TrainSchedule {
        epochs: 60, warmup_epochs: 10, lr: 1e-3, post_warmup_lr: 3e-4, batch_size: 64,
        ..Default::default()
    };
    let warm = make_dataset(&config_grid(&base, &[0.999], &dirs), 50, 42, 3).unwrap();
    train_bptt(&train, Some(&warm), None, &mut rnn, &schedule, None).unwrap();
    let fixture = prepare_fixture(&rnn, &train).unwrap();
    let timing = RtTiming::from_frame_rate(75.0, 0.0);
    let spec = HistogramSpec::default();

    let mut control = RtifyParams::init(64, 64, 42);
    let refs: Vec<&rtify_core::backbone::HiddenTrace> = fixture.traces.iter().take(256).collect();
    init_theta(&mut control, &refs).unwrap();

    let mut trained = RtifyParams::init(64, 64, 42);
    let cfg = SelfPenaltyConfig { epochs: 200, lr: 0.01, lambda: 1e-3, ..Default::default() };
    let t0 = Instant::now();
    let log = train_self_penalty(&fixture, &mut trained, &timing, &cfg).unwrap();
    println!("selfpenalty 200 epochs in {:?} loss {:.4} -> {:.4}", t0.elapsed(), log.initial_loss(), log.final_loss());

    for (name, p) in [("control", &control), ("trained", &trained)] {
        let o = rtify_outcomes(&fixture, p, &spec, &timing, ReadoutPolicy::SumToTau).unwrap();
        let m = summarize_outcomes(&o, 7, &spec, None).unwrap();
        let taus: Vec<f64> = m.per_condition.iter().map(|c| (c.mean_tau * 10.0).round() / 10.0).collect();
        let accs: Vec<f64> = m.per_condition.iter().map(|c| (c.accuracy * 1000.0).round() / 1000.0).collect();
        println!("{name}: mean tau {taus:?} acc {accs:?} theta {}", p.theta_value());
    }
}

#[test]
#[ignore]
fn calibrate_wwfit() {
    use rtify_core::objectives::{histogram_mse, soft_histogram};
    use rtify_core::wongwang::{ww_fit, ww_signed_rts, WwFitConfig, WwTrial};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // synthetic frozen-classifier logits: gap grows with coherence
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut trials = Vec::new();
    for (cond, c) in CANONICAL_COHERENCES.iter().enumerate() {
        for _ in 0..25 {
            let gap = 3.0 * c + 0.3 * (rng.random::<f32>() - 0.5);
            trials.push(WwTrial {
                drive: vec![gap / 2.0, -gap / 2.0],
                label: 0,
                condition: cond,
            });
        }
    }
    let ddm = DdmParams::default();
    let reference: Vec<Vec<f32>> = ddm_reference_by_condition(&ddm, &CANONICAL_COHERENCES, 1500, 42)
        .unwrap().into_iter().map(|s| s.signed_rts).collect();
    let spec = HistogramSpec::default();
    let mut params = WwParams { dt_ms: 2.0, ..WwParams::defaults(2) };
    let cfg = WwFitConfig {
        epochs: 150, lr: 0.015, max_steps: 875, t0_ms: 250.0, seed: 9,
        ..Default::default()
    };

    let rts0 = ww_signed_rts(&trials, &params, 7, &spec, &cfg, 0).unwrap();
    let mse = |rts: &Vec<Vec<f32>>| -> f64 {
        let mut t = 0.0; let mut n = 0;
        for (m, r) in rts.iter().zip(&reference) {
            if m.is_empty() || r.is_empty() { continue; }
            t += histogram_mse(&soft_histogram(m, &spec).unwrap(), &soft_histogram(r, &spec).unwrap()).unwrap();
            n += 1;
        }
        t / n as f64
    };
    println!("initial eval MSE {:.6}", mse(&rts0));

    let t0 = Instant::now();
    let log = ww_fit(&trials, &reference, &mut params, &spec, &cfg).unwrap();
    println!("ww fit 120 epochs in {:?} loss {:.6} -> {:.6}", t0.elapsed(), log.initial_loss(), log.final_loss());
    let rts1 = ww_signed_rts(&trials, &params, 7, &spec, &cfg, 0).unwrap();
    println!("final eval MSE {:.6} (ratio {:.3})", mse(&rts1), mse(&rts1) / mse(&rts0));
    for (cond, (m, r)) in rts1.iter().zip(&reference).enumerate() {
        let mm: f64 = m.iter().filter(|v| **v > 0.0).map(|v| *v as f64).sum::<f64>()
            / m.iter().filter(|v| **v > 0.0).count().max(1) as f64;
        let rm: f64 = r.iter().filter(|v| **v > 0.0).map(|v| *v as f64).sum::<f64>()
            / r.iter().filter(|v| **v > 0.0).count().max(1) as f64;
        println!("cond {cond}: model mean correct rt {mm:.0} vs ref {rm:.0}");
    }
    println!("fitted params: theta {} i0 {} j_in {} sigma {} gamma {}", params.theta, params.i0, params.j_in, params.sigma_noise, params.gamma);
}
