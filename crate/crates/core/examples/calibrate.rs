// Scratch calibration phase 3: weak-likelihood regime + training stability.
use tacinfer::cvae::*;
use tacinfer::evaluation::*;
use tacinfer::kinetics::*;
use tacinfer::mcmc::*;
use tacinfer::priors::*;
use tacinfer::seed::{derive_seed, rng_for};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20260810);
    let amp: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2.2e-7);
    println!("epochs={epochs} seed={seed} amp={amp:.2e}");

    let schedule = FrameSchedule::<f64>::default_54_frame();
    let grid = UniformGrid::covering(7200.0, 0.1).unwrap();
    let coeffs = ReferenceTacCoefficients { amplitude: amp, ..Default::default() };
    let reference = reference_tac_from_coefficients(grid, &coeffs).unwrap();
    let forward = ForwardModel::new(reference, schedule.clone(), NoiseModel::default()).unwrap();
    let prior = PriorConfig::setting_one(SpreadKind::Variance);

    let master = generate_dataset(&prior, 10_000, &forward, seed).unwrap();
    let d2000 = Dataset { samples: master.samples[..2000].to_vec(), seed, prior, truncation_acceptance: master.truncation_acceptance };

    // training stability scan across derived seeds
    let tc_stab = TrainConfig { epochs: 120, seed, ..TrainConfig::default() };
    for s in 0..6u64 {
        let mut tc = tc_stab.clone();
        tc.seed = derive_seed(seed, "stability", s);
        for variant in [Variant::Vanilla, Variant::DualDecoder, Variant::DualEncoder] {
            match train(variant, &d2000, &tc) {
                Ok(m) => print!("[s{s} {variant}: ok lossN={:.2}] ", m.epoch_losses.last().unwrap()),
                Err(e) => print!("[s{s} {variant}: DIVERGED {e}] "),
            }
        }
    }
    println!();

    let mut trng = rng_for(seed, "test-filter", 0);
    let test_params = select_test_params(&prior, 20, 0.26, &mut trng).unwrap();
    let measurements: Vec<_> = test_params.iter().enumerate().map(|(i, p)| {
        let mut rng = rng_for(seed, "test-sample", i as u64);
        forward.simulate(p, &mut rng).unwrap().0
    }).collect();

    let mcmc_config = McmcConfig { n_iterations: 10_000, burn_in: 2_000, ..McmcConfig::default() };
    let t = std::time::Instant::now();
    let mcmc_sets: Vec<_> = measurements.iter().enumerate().map(|(i, y)| {
        let mut rng = rng_for(seed, "mcmc-chain", i as u64);
        run_chain(y, &mcmc_config, &prior, &forward, None, i, &mut rng).unwrap().samples
    }).collect();
    println!("mcmc panel in {:.0?}", t.elapsed());
    // posterior snapshot
    for (i, s) in mcmc_sets.iter().enumerate().take(4) {
        let stats = |p: usize| {
            let c = s.column(p);
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            (m, sd)
        };
        let (m0, s0) = stats(0); let (m1, s1) = stats(1); let (m2, s2) = stats(2);
        println!("  chain {i}: dvr {m0:.3}+-{s0:.3} k2 {m1:.4}+-{s1:.4} r1 {m2:.3}+-{s2:.3} (true {:.3},{:.1e},{:.3})",
            test_params[i].dvr, test_params[i].k2_per_min, test_params[i].r1);
    }

    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let mut dd_model = None;
    for variant in [Variant::Vanilla, Variant::DualEncoder, Variant::DualDecoder] {
        let t = std::time::Instant::now();
        let model = train(variant, &d2000, &tc).unwrap();
        let sets = infer_posteriors(&model, &measurements, 8000, seed ^ 0xabc).unwrap();
        let report = evaluate_methods(&mcmc_sets, &[sets], KlEstimator::GaussianFit, 1).unwrap();
        let m = &report.methods[0];
        println!(
            "{variant}: {:.0?} lossN={:.3} | dmu% dvr={:.1} k2={:.1} r1={:.1} | Dkl dvr={:.3} k2={:.3} r1={:.3}",
            t.elapsed(), model.epoch_losses.last().unwrap(),
            100.0*m.params[0].delta_mu, 100.0*m.params[1].delta_mu, 100.0*m.params[2].delta_mu,
            m.params[0].d_kl, m.params[1].d_kl, m.params[2].d_kl,
        );
        if variant == Variant::DualDecoder { dd_model = Some(model); }
    }

    let model = dd_model.unwrap();
    let t = std::time::Instant::now();
    let shift = sweep_dvr_shift(&[1.0, 1.5, 4.0], &model, &prior, &forward, &mcmc_config, 6, 8000, KlEstimator::GaussianFit, seed ^ 0x75).unwrap();
    for p in &shift {
        println!("shift DVR*={}: Dkl avg={:.3} (dvr={:.3} k2={:.3} r1={:.3})", p.dvr_star, p.d_kl_mean, p.per_param_mean[0], p.per_param_mean[1], p.per_param_mean[2]);
    }
    println!("shift in {:.0?}", t.elapsed());

    let ctx = SweepContext {
        dataset: &master, forward: &forward, test_measurements: &measurements,
        mcmc_reference: &mcmc_sets, train_config: &tc, n_posterior_samples: 8000,
        estimator: KlEstimator::GaussianFit, seed: seed ^ 0x51,
    };
    let t = std::time::Instant::now();
    match sweep_training_size(&ctx, &[500, 5000, 10000]) {
        Ok(sizes) => for p in &sizes {
            println!("size {}: Dkl avg={:.3} (dvr={:.3} k2={:.3} r1={:.3})", p.size, p.d_kl_mean, p.per_param_mean[0], p.per_param_mean[1], p.per_param_mean[2]);
        },
        Err(e) => println!("size sweep failed: {e}"),
    }
    println!("sizes in {:.0?}", t.elapsed());

    // beta sensitivity (1 repeat to keep it quick)
    let t = std::time::Instant::now();
    match sweep_hyperparameters(&ctx, HyperParam::BetaB, &[0.6, 1.2, 1.8], 1) {
        Ok(pts) => for p in &pts {
            println!("beta {}: Dkl avg={:.3}", p.grid_value, p.d_kl_mean);
        },
        Err(e) => println!("beta sweep failed: {e}"),
    }
    println!("beta in {:.0?}", t.elapsed());
}
