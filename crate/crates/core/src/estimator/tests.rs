use super::*;
use crate::model::{
    arm_problem, complete_log_likelihood, residuals, simulate, tempered_log_likelihood, theta_objective, PriorStrengths,
    SimulationConfig,
};
use crate::points::Points;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    dataset: LongitudinalDataset,
    truth: ModelParams,
    state: LatentState,
    priors: PriorConfig,
    model: ModelConfig,
}

fn fixture(n_subjects: usize, noise_std: f64) -> Fixture {
    let p = arm_problem(2, 5).unwrap();
    let sim = SimulationConfig { n_subjects, n_observations: 3, noise_std, seed: 11, ..Default::default() };
    let (dataset, state) = simulate(&p.truth, &p.config, &sim).unwrap();
    let priors = PriorConfig::centered_on(&p.truth, &PriorStrengths::default());
    Fixture { dataset, truth: p.truth, state, priors, model: p.config }
}

fn stats_of(v: f64, template: &Points) -> SufficientStatistics {
    SufficientStatistics {
        template: template.scaled(v),
        control_points: Points::zeros(2, 1),
        momenta: Points::zeros(2, 1),
        mixing: DMatrix::from_element(2, 1, v),
        sum_onset: v,
        sum_onset_sq: v,
        sum_log_accel_sq: v,
        sum_residual: v,
    }
}

#[test]
fn adaptation_examples() {
    let cfg = SamplerConfig::default();
    assert_eq!(adapted_std(0.7, 0.3, 5, &cfg), 0.7);
    assert!((adapted_std(0.5, 1.0, 1, &cfg) - 1.5).abs() < 1e-15);
    let down = 1.0 - adapted_std(1.0, 0.0, 16, &cfg);
    assert!((down - 16f64.powf(-0.51)).abs() < 1e-15);
    assert!((down - 0.2429).abs() < 5e-4);
    assert_eq!(adapted_std(0.01, 0.0, 1, &cfg), cfg.min_std);
}

#[test]
fn adapt_uses_recent_window() {
    let cfg = SamplerConfig { n_detect: 4, ..Default::default() };
    let mut blocks = make_blocks(0, 1, &cfg);
    for a in [false, false, true, true, true, true] {
        blocks[3].record(a);
    }
    assert_eq!(blocks[3].recent_rate(), 1.0);
    assert_eq!((blocks[3].accepted, blocks[3].proposed), (4, 6));
    adapt_proposals(&mut blocks, 1, &cfg);
    assert!((blocks[3].proposal_std - 1.1).abs() < 1e-12);
}

#[test]
fn temperature_examples() {
    let s = TemperatureSchedule { initial: 16.0, plateau: 0, rate: 0.5 };
    let ts: Vec<f64> = (0..7).map(|k| temperature(k, &s)).collect();
    assert_eq!(ts, vec![16.0, 8.0, 4.0, 2.0, 1.0, 1.0, 1.0]);
    let off = TemperatureSchedule::disabled();
    assert!((0..1000).all(|k| temperature(k, &off) == 1.0));
    let b = TemperatureSchedule::for_budget(10.0, 1000);
    assert_eq!(temperature(100, &b), 10.0);
    assert!((temperature(500, &b) - 1.0).abs() < 1e-9);
    assert!(TemperatureSchedule { initial: 0.5, plateau: 0, rate: 0.5 }.validate().is_err());
    assert!(TemperatureSchedule { initial: 2.0, plateau: 0, rate: 1.0 }.validate().is_err());
}

proptest! {
    #[test]
    fn temperature_is_nonincreasing_and_at_least_one(
        initial in 1.0f64..1e3, plateau in 0usize..2000, rate in 0.5f64..0.9999
    ) {
        let s = TemperatureSchedule { initial, plateau, rate };
        let mut prev = f64::INFINITY;
        for k in 0..100_000 {
            let t = temperature(k, &s);
            prop_assert!(t >= 1.0 && t <= prev);
            prev = t;
        }
    }
}

#[test]
fn step_sizes() {
    let p = StepSizePolicy::for_budget(100);
    assert_eq!(p.step_size(50), 1.0);
    assert_eq!(p.step_size(51), 1.0);
    assert!((p.step_size(52) - 2f64.powf(-0.65)).abs() < 1e-15);
    let g = StepSizePolicy::Geometric { burn_in: 0, rate: 0.9 };
    assert!((g.step_size(2) - 0.81).abs() < 1e-15);
    assert!(StepSizePolicy::Polynomial { burn_in: 0, exponent: 0.4 }.validate().is_err());
}

#[test]
fn sa_update_examples() {
    let tpl = Points::zeros(2, 3);
    let two = stats_of(2.0, &tpl);
    let four = stats_of(4.0, &tpl);
    assert_eq!(sa_update(&two, &four, 1.0).unwrap(), four);
    assert_eq!(sa_update(&two, &four, 0.5).unwrap(), stats_of(3.0, &tpl));
    assert!(sa_update(&two, &four, 0.0).is_err());

    let mut s = two.clone();
    let mut gap = 2.0;
    for _ in 0..100 {
        s = sa_update(&s, &four, 0.3).unwrap();
        let g = (s.sum_residual - 4.0).abs();
        if gap > 1e-6 {
            assert!((g / gap - 0.7).abs() < 1e-6);
        }
        gap = g;
    }
    assert!(gap <= 1e-15);
}

fn random_stats(rng: &mut impl Rng, theta: &ModelParams, n: f64) -> SufficientStatistics {
    let mut jitter = |p: &Points, s: f64| {
        let v: Vec<f64> = p.as_slice().iter().map(|x| x + s * (rng.random::<f64>() - 0.5)).collect();
        Points::new(p.dim(), v).unwrap()
    };
    let template = jitter(theta.mean_template.vertices(), 0.1);
    let control_points = jitter(&theta.mean_control_points, 0.1);
    let momenta = jitter(&theta.mean_momenta, 0.1);
    let mixing = theta.mean_mixing.map(|x| x + 0.1 * (rng.random::<f64>() - 0.5));
    let mean_onset = 60.0 + 20.0 * rng.random::<f64>();
    let var_onset = 0.1 + 4.0 * rng.random::<f64>();
    SufficientStatistics {
        template,
        control_points,
        momenta,
        mixing,
        sum_onset: n * mean_onset,
        sum_onset_sq: n * (mean_onset * mean_onset + var_onset),
        sum_log_accel_sq: n * 0.05 * rng.random::<f64>(),
        sum_residual: 50.0 * rng.random::<f64>(),
    }
}

#[test]
fn m_step_log_accel_example() {
    let f = fixture(1, 0.0);
    let mut priors = f.priors.clone();
    priors.log_accel_weight = 1.0;
    priors.log_accel_scale = 0.01;
    let mut stats = SufficientStatistics::from_state(&f.state, 1.0);
    stats.sum_log_accel_sq = 0.0;
    let out = m_step(&stats, &priors, &f.truth.mean_template, 99, 1000.0).unwrap();
    assert!((out.theta.var_log_accel - 0.0001).abs() < 1e-18);
}

#[test]
fn m_step_data_dominated_template() {
    let f = fixture(1, 0.0);
    let mut priors = f.priors.clone();
    priors.template_var = priors.fixed.template / 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stats = random_stats(&mut rng, &f.truth, 10.0);
    let out = m_step(&stats, &priors, &f.truth.mean_template, 10, 100.0).unwrap();
    let diff = out.theta.mean_template.vertices().sub(&stats.template).norm_squared().sqrt();
    assert!(diff <= 1e-7 * stats.template.norm_squared().sqrt());
}

fn scalar(theta: &ModelParams, j: usize) -> f64 {
    [theta.reference_time, theta.var_time_shift, theta.var_log_accel, theta.var_noise][j]
}

fn set_scalar(theta: &mut ModelParams, j: usize, v: f64) {
    match j {
        0 => theta.reference_time = v,
        1 => theta.var_time_shift = v,
        2 => theta.var_log_accel = v,
        _ => theta.var_noise = v,
    }
}

/// Cyclic golden-section maximization of the objective over the four scalar parameters,
/// in log coordinates for the variances.
fn numerical_maximizer(
    stats: &SufficientStatistics,
    start: &ModelParams,
    priors: &PriorConfig,
    n: usize,
    lambda: f64,
) -> ModelParams {
    let mut theta = start.clone();
    let to_coord = |j: usize, v: f64| if j == 0 { v } else { v.ln() };
    let from_coord = |j: usize, x: f64| if j == 0 { x } else { x.exp() };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        for j in 0..4 {
            let x0 = to_coord(j, scalar(&theta, j));
            let width = if j == 0 { 20.0 } else { 6.0 };
            let (mut a, mut b) = (x0 - width, x0 + width);
            let f = |x: f64| {
                let mut t = theta.clone();
                set_scalar(&mut t, j, from_coord(j, x));
                theta_objective(stats, &t, priors, n, lambda)
            };
            while b - a > 1e-12 * (1.0 + x0.abs()) {
                let c = b - g * (b - a);
                let d = a + g * (b - a);
                if f(c) > f(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            set_scalar(&mut theta, j, from_coord(j, 0.5 * (a + b)));
        }
    }
    theta
}

#[test]
fn m_step_matches_numerical_maximizer() {
    let f = fixture(1, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = 5 + rng.random_range(0..100);
        let lambda = 40.0 * n as f64;
        let mut priors = f.priors.clone();
        priors.reference_time_var = 1.0 + 50.0 * rng.random::<f64>();
        priors.reference_time_mean = 60.0 + 20.0 * rng.random::<f64>();
        priors.time_shift_weight = 0.5 + 3.0 * rng.random::<f64>();
        let stats = random_stats(&mut rng, &f.truth, n as f64);
        let out = m_step(&stats, &priors, &f.truth.mean_template, n, lambda).unwrap().theta;
        let mut start = out.clone();
        start.reference_time += 1.0;
        start.var_time_shift *= 2.0;
        start.var_log_accel *= 0.5;
        start.var_noise *= 3.0;
        let num = numerical_maximizer(&stats, &start, &priors, n, lambda);
        for j in 0..4 {
            let (a, b) = (scalar(&out, j), scalar(&num, j));
            assert!((a - b).abs() <= 1e-4 * a.abs(), "component {j}: {a} vs {b}");
        }
        assert!(theta_objective(&stats, &out, &priors, n, lambda) >= theta_objective(&stats, &num, &priors, n, lambda) - 1e-9);
    }
}

#[test]
fn m_step_is_stationary() {
    let f = fixture(1, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let n = 5 + rng.random_range(0..100);
        let lambda = 40.0 * n as f64;
        let stats = random_stats(&mut rng, &f.truth, n as f64);
        let out = m_step(&stats, &f.priors, &f.truth.mean_template, n, lambda).unwrap().theta;
        let base = theta_objective(&stats, &out, &f.priors, n, lambda);
        let mut grad2 = 0.0;
        // scalar components; variances scaled by their value, the reference time by its prior std
        for j in 0..4 {
            let v = scalar(&out, j);
            let scale = if j == 0 { out.var_time_shift.sqrt() } else { v.abs() };
            // the objective is quadratic in the reference time, so a wide stencil is exact
            let h = if j == 0 { 1e-2 } else { 1e-6 * v.abs() };
            let mut p = out.clone();
            set_scalar(&mut p, j, v + h);
            let mut m = out.clone();
            set_scalar(&mut m, j, v - h);
            let d = (theta_objective(&stats, &p, &f.priors, n, lambda) - theta_objective(&stats, &m, &f.priors, n, lambda))
                / (2.0 * h)
                * scale;
            grad2 += d * d;
        }
        // a few entries of each array-valued mean
        for idx in [0usize, 7, 19] {
            let h = 1e-6;
            let mut p = out.clone();
            let mut v = p.mean_template.vertices().clone();
            v.as_mut_slice()[idx] += h;
            p.mean_template = p.mean_template.with_vertices(v);
            let mut m = out.clone();
            let mut v = m.mean_template.vertices().clone();
            v.as_mut_slice()[idx] -= h;
            m.mean_template = m.mean_template.with_vertices(v);
            let d = (theta_objective(&stats, &p, &f.priors, n, lambda) - theta_objective(&stats, &m, &f.priors, n, lambda))
                / (2.0 * h)
                * f.priors.fixed.template;
            grad2 += d * d;
        }
        let mut p = out.clone();
        p.mean_mixing[(3, 1)] += 1e-6;
        let mut m = out.clone();
        m.mean_mixing[(3, 1)] -= 1e-6;
        let d = (theta_objective(&stats, &p, &f.priors, n, lambda) - theta_objective(&stats, &m, &f.priors, n, lambda))
            / 2e-6
            * f.priors.fixed.mixing;
        grad2 += d * d;
        assert!(grad2.sqrt() < 1e-6, "gradient {} at objective {base}", grad2.sqrt());
    }
}

#[test]
fn m_step_rejects_bad_input() {
    let f = fixture(1, 0.0);
    let mut stats = SufficientStatistics::from_state(&f.state, 1.0);
    assert!(m_step(&stats, &f.priors, &f.truth.mean_template, 0, 10.0).is_err());
    stats.sum_residual = f64::NAN;
    assert!(matches!(m_step(&stats, &f.priors, &f.truth.mean_template, 1, 10.0), Err(Error::Numerical(_))));
}

fn fixed_template_cfg(f: &Fixture) -> TemplateProposalConfig {
    TemplateProposalConfig::regular(&f.truth.mean_template, 0, &f.model.kernel)
}

#[test]
fn block_isolation() {
    let p = arm_problem(4, 1).unwrap();
    let sim = SimulationConfig { n_subjects: 3, n_observations: 2, seed: 2, ..Default::default() };
    let (_, state) = simulate(&p.truth, &p.config, &sim).unwrap();
    let priors = PriorConfig::centered_on(&p.truth, &PriorStrengths::default());
    let tcfg = TemplateProposalConfig::regular(&p.truth.mean_template, 0, &p.config.kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flat = |s: &LatentState| -> Vec<f64> {
        let pop = &s.population;
        let mut v: Vec<f64> = pop.template.vertices().as_slice().to_vec();
        v.extend_from_slice(pop.control_points.as_slice());
        v.extend_from_slice(pop.momenta.as_slice());
        v.extend(pop.mixing.iter());
        for z in &s.individuals {
            v.push(z.onset_age);
            v.push(z.log_acceleration);
            v.extend(&z.sources);
        }
        v
    };
    let before = flat(&state);
    let blocks = make_blocks(4, 3, &SamplerConfig::default());
    let mut covered = vec![0usize; before.len()];
    for b in &blocks {
        let cand = propose_block(b.kind, 0.5, &state, &p.truth, &priors, &tcfg, &mut rng).unwrap();
        let after = flat(&cand);
        let changed: Vec<usize> = (0..before.len()).filter(|&i| before[i].to_bits() != after[i].to_bits()).collect();
        for &i in &changed {
            covered[i] += 1;
        }
        if let BlockKind::Subject(_) = b.kind {
            assert_eq!(changed.len(), 6);
        }
    }
    assert!(covered.iter().all(|&c| c == 1), "every scalar belongs to exactly one block");
}

#[test]
fn vanishing_proposal_std_is_identity() {
    let f = fixture(2, 0.0);
    let tcfg = fixed_template_cfg(&f);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for b in make_blocks(2, 2, &SamplerConfig::default()) {
        let cand = propose_block(b.kind, 0.0, &f.state, &f.truth, &f.priors, &tcfg, &mut rng).unwrap();
        assert_eq!(cand, f.state);
    }
}

#[test]
fn subject_proposal_std() {
    let f = fixture(1, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = &f.state.individuals[0];
    let std = 0.3;
    let n = 10_000;
    let mut sums = [0.0f64; 4];
    let mut sums2 = [0.0f64; 4];
    for _ in 0..n {
        let c = propose_individual(z, std, &f.truth, &mut rng);
        let d = [
            c.onset_age - z.onset_age,
            c.log_acceleration - z.log_acceleration,
            c.sources[0] - z.sources[0],
            c.sources[1] - z.sources[1],
        ];
        for k in 0..4 {
            sums[k] += d[k];
            sums2[k] += d[k] * d[k];
        }
    }
    let expected = [std * f.truth.var_time_shift.sqrt(), std * f.truth.var_log_accel.sqrt(), std, std];
    for k in 0..4 {
        let mean = sums[k] / n as f64;
        let sd = (sums2[k] / n as f64 - mean * mean).sqrt();
        assert!((sd / expected[k] - 1.0).abs() < 0.03, "component {k}: {sd} vs {}", expected[k]);
        // symmetric increments
        assert!(mean.abs() < 4.0 * expected[k] / (n as f64).sqrt());
    }
}

#[test]
fn template_proposal_single_control_point() {
    let f = fixture(1, 0.0);
    let y0 = &f.truth.mean_template;
    let cp = Points::new(2, vec![-0.5, 0.0]).unwrap();
    let cfg = TemplateProposalConfig::with_control_points(y0, cp.clone(), &f.model.kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cand = propose_template(&cfg, y0, 0.2, &mut rng).unwrap();
    let disp = cand.vertices().sub(y0.vertices());
    let ref_v = (0..y0.n_vertices()).max_by(|&a, &b| {
        let na = crate::points::dot(disp.point(a), disp.point(a));
        let nb = crate::points::dot(disp.point(b), disp.point(b));
        na.total_cmp(&nb)
    });
    let r = disp.point(ref_v.unwrap()).to_vec();
    for v in 0..y0.n_vertices() {
        let d = disp.point(v);
        assert!((d[0] * r[1] - d[1] * r[0]).abs() < 1e-14);
        let k = f.model.kernel.eval_unchecked(y0.vertices().point(v), cp.point(0));
        let norm = crate::points::dot(d, d).sqrt();
        let norm_r = crate::points::dot(&r, &r).sqrt();
        let k_r = f.model.kernel.eval_unchecked(y0.vertices().point(ref_v.unwrap()), cp.point(0));
        assert!((norm / norm_r - k / k_r).abs() < 1e-12);
    }
}

#[test]
fn template_proposal_covariance() {
    let f = fixture(1, 0.0);
    let y0 = &f.truth.mean_template;
    let cfg = fixed_template_cfg(&f);
    assert!(cfg.n_control_points() * 3 <= y0.n_vertices());
    let std = 0.1;
    let n = 10_000;
    let nv = y0.n_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // x-coordinates of all vertices; y-coordinates are identically distributed and independent
    let mut cov = DMatrix::<f64>::zeros(nv, nv);
    for _ in 0..n {
        let c = propose_template(&cfg, y0, std, &mut rng).unwrap();
        let d: Vec<f64> = (0..nv).map(|v| c.vertices().point(v)[0] - y0.vertices().point(v)[0]).collect();
        for a in 0..nv {
            for b in 0..nv {
                cov[(a, b)] += d[a] * d[b];
            }
        }
    }
    cov /= n as f64;
    let d = DMatrix::from_fn(nv, cfg.n_control_points(), |v, p| cfg.convolution[v][p]);
    let expected = &d * d.transpose() * (std * std);
    let scale = expected.diagonal().max();
    for a in 0..nv {
        for b in 0..nv {
            let e = expected[(a, b)];
            // relative 5% on entries of non-negligible size, measured against the largest variance
            assert!((cov[(a, b)] - e).abs() < 0.05 * e.abs().max(0.5 * scale), "({a},{b}) {} vs {e}", cov[(a, b)]);
        }
    }
}

#[test]
fn acceptance_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    assert!((0..10_000).all(|_| mh_accept(0.0, &mut rng)));
    assert!((0..10_000).all(|_| !mh_accept(-50.0, &mut rng)));
    assert!(!mh_accept(f64::NAN, &mut rng));
    assert!(!mh_accept(f64::NEG_INFINITY, &mut rng));
    let hits = (0..20_000).filter(|_| mh_accept(-(2f64.ln()), &mut rng)).count() as f64 / 20_000.0;
    assert!((hits - 0.5).abs() < 0.02);
}

#[test]
fn initialization_heuristics() {
    let f = fixture(6, 0.01);
    let mut pop = f.truth.as_population();
    pop.mixing.fill(0.0);
    let (theta, z) = initialize(&f.dataset, pop, 0.04, &f.model).unwrap();
    assert!((theta.reference_time - f.dataset.mean_time()).abs() < 1e-12);
    let means: Vec<f64> = f.dataset.subjects.iter().map(|s| s.mean_time()).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64;
    assert!((theta.var_time_shift - var).abs() < 1e-12);
    assert!(z.individuals.iter().all(|i| i.onset_age == theta.reference_time && i.log_acceleration == 0.0));
    let r: f64 = residuals(&f.dataset, &z, &f.model).unwrap().iter().flatten().sum();
    assert!((theta.var_noise - r / f.dataset.total_residual_dimension()).abs() < 1e-15);
}

fn small_config(iterations: usize, seed: u64) -> EstimatorConfig {
    EstimatorConfig::for_budget(iterations, seed)
}

#[test]
fn incremental_deltas_match_full_evaluation() {
    let f = fixture(4, 0.02);
    let mut theta = f.truth.clone();
    theta.var_noise = 4e-4;
    let est = Estimator::new(&f.dataset, theta.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), small_config(10, 1))
        .unwrap();
    let tcfg = fixed_template_cfg(&f);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in [1.0, 3.0] {
        let base = tempered_log_likelihood(&f.dataset, &f.state, &theta, &f.priors, &f.model, t).unwrap();
        for b in make_blocks(2, 4, &SamplerConfig::default()) {
            let cand = propose_block(b.kind, 0.5, &f.state, &theta, &f.priors, &tcfg, &mut rng).unwrap();
            let full = tempered_log_likelihood(&f.dataset, &cand, &theta, &f.priors, &f.model, t).unwrap() - base;
            let inc = match b.kind {
                BlockKind::Subject(i) => est.subject_delta(i, &cand.individuals[i], t).unwrap().0,
                _ => est.population_delta(&cand.population, t).unwrap().0,
            };
            assert!((full - inc).abs() < 1e-10 * (1.0 + full.abs()), "{:?}: {full} vs {inc}", b.kind);
        }
    }
}

#[test]
fn zero_budget_returns_initial_parameters() {
    let f = fixture(3, 0.02);
    let out =
        run_estimation(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), small_config(0, 1))
            .unwrap();
    assert_eq!(out.theta, f.truth);
    assert!(out.trace.is_empty());
    assert_eq!(out.iterations, 0);
}

#[test]
fn runs_are_deterministic() {
    let f = fixture(4, 0.02);
    let run = |seed| {
        run_estimation(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), small_config(12, seed))
            .unwrap()
    };
    let a = run(3);
    let b = run(3);
    assert_eq!(a.trace.len(), 12);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.state, b.state);
    let c = run(4);
    assert_ne!(a.trace, c.trace);
    for row in &a.trace {
        assert!(row.log_likelihood.is_finite());
        assert_eq!(row.block_acceptance.len(), 3 + 2 + 4);
    }
}

#[test]
fn plain_mcmc_em_tracks_current_statistics() {
    let f = fixture(3, 0.02);
    let mut cfg = small_config(6, 2);
    cfg.temperature = TemperatureSchedule::disabled();
    cfg.step_size = StepSizePolicy::Polynomial { burn_in: usize::MAX, exponent: 0.65 };
    let mut est = Estimator::new(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), cfg).unwrap();
    for _ in 0..6 {
        est.step().unwrap();
        let exact = crate::model::sufficient_statistics(&f.dataset, est.state(), &f.model).unwrap();
        let s = &est.stats;
        assert_eq!(s.template, exact.template);
        assert_eq!(s.mixing, exact.mixing);
        assert_eq!(s.sum_onset, exact.sum_onset);
        assert!((s.sum_residual - exact.sum_residual).abs() <= 1e-12 * exact.sum_residual);
        let theta = m_step(&exact, &f.priors, &f.truth.mean_template, 3, f.dataset.total_residual_dimension()).unwrap().theta;
        assert_eq!(est.theta().mean_template, theta.mean_template);
        assert_eq!(est.theta().reference_time, theta.reference_time);
        assert!((est.theta().var_noise - theta.var_noise).abs() <= 1e-12 * theta.var_noise);
    }
}

#[test]
fn trace_log_likelihood_is_complete_likelihood() {
    let f = fixture(3, 0.02);
    let mut est =
        Estimator::new(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), small_config(4, 5))
            .unwrap();
    for _ in 0..4 {
        let ll = est.step().unwrap().log_likelihood;
        let exact = complete_log_likelihood(&f.dataset, est.state(), est.theta(), &f.priors, &f.model).unwrap();
        assert!((ll - exact).abs() < 1e-9 * exact.abs().max(1.0));
    }
}

#[test]
fn checkpoint_resume_is_seamless() {
    let f = fixture(3, 0.02);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut cfg = small_config(8, 6);
    cfg.checkpoint_every = 4;
    cfg.checkpoint_path = Some(path.clone());
    let full = run_estimation(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), cfg.clone())
        .unwrap();

    let mut est = Estimator::new(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), cfg).unwrap();
    for _ in 0..4 {
        est.step().unwrap();
    }
    est.checkpoint().save(&path).unwrap();
    drop(est);
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 4);
    let resumed = Estimator::from_checkpoint(&f.dataset, ck, f.priors.clone(), f.model.clone()).unwrap().run().unwrap();
    assert_eq!(resumed.trace, full.trace);
    assert_eq!(resumed.theta, full.theta);
}

#[test]
fn checkpoint_rejects_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    std::fs::write(&path, "{\"format\": \"other\"}").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn early_stop_fires_on_stable_parameters() {
    let f = fixture(3, 0.02);
    let mut cfg = small_config(200, 7);
    cfg.temperature = TemperatureSchedule::disabled();
    cfg.step_size = StepSizePolicy::Geometric { burn_in: 0, rate: 0.5 };
    cfg.early_stop = Some(EarlyStop { tolerance: 1e-5, window: 5 });
    let out = run_estimation(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), cfg).unwrap();
    assert!(out.stopped_early);
    assert!(out.iterations < 200);
}

#[test]
fn invalid_configs_are_rejected() {
    let f = fixture(2, 0.0);
    let mut cfg = small_config(10, 1);
    cfg.checkpoint_every = 5;
    assert!(matches!(
        run_estimation(&f.dataset, f.truth.clone(), f.state.clone(), f.priors.clone(), f.model.clone(), cfg),
        Err(Error::Config(_))
    ));
    let mut cfg = small_config(10, 1);
    cfg.sampler.delta = 0.4;
    assert!(cfg.validate().is_err());
}
