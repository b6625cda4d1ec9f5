//! Behaviour of the blind offline adaptation loop on the faulty-node
//! reference network.

use noisybp::adapt::KappaDiagnostic;
use noisybp::bp::NoMessageErrors;
use noisybp::experiment::{blind_adaptation, calibrate, Setup};
use noisybp::rng::{stream, Substream};
use noisybp::*;

fn spec(seed: u64, kappa_max: usize) -> ExperimentSpec {
    ExperimentSpec {
        seed,
        calibration_slots: 4000,
        adaptation_window: 2500,
        adaptation: AdaptationConfig {
            kappa_max,
            ..AdaptationConfig::default()
        },
        ..ExperimentSpec::default()
    }
}

fn sampler(setup: &Setup, spec: &ExperimentSpec) -> CalibratedErrorSampler {
    let cal = calibrate(setup, spec);
    CalibratedErrorSampler::calibrate(&setup.topology, &cal.powers, &setup.errors).unwrap()
}

/// Network-average deflection `(μ₁ − μ₀)² / σ₀²` of the fused linear-BP
/// statistic on fresh erroneous slots.
fn held_out_deflection(setup: &Setup, sampler: &CalibratedErrorSampler, weights: &FusionWeights, seed: u64) -> f64 {
    let topo = &setup.topology;
    let rule = weights.message_rule(topo).unwrap();
    let dw = weights.decision_weights(topo).unwrap();
    let n = topo.node_count();
    let mut rng = stream(seed, 7, Substream::Auxiliary);
    let mut by_label = vec![[Vec::new(), Vec::new()]; n];
    for _ in 0..3000 {
        let (state, gamma) = setup.scenario.sample_slot(&mut rng);
        let eps = sampler.sample_le_vector(&mut rng);
        let noisy: Vec<f64> = gamma.iter().zip(&eps).map(|(g, e)| g + e).collect();
        let mut ms = MessageState::new(topo, Averaging::Off);
        let mut noise = noisybp::bp::SampledMessageErrors { sampler, rng: &mut rng };
        for _ in 0..30 {
            iterate(topo, &rule, &mut ms, &noisy, &mut noise);
        }
        let lambda = weighted_decision(topo, &ms, &noisy, &dw).unwrap().values;
        for j in 0..n {
            by_label[j][usize::from(state.x()[j])].push(lambda[j]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    by_label
        .iter()
        .map(|[zero, one]| {
            let m0 = mean(zero);
            let var0 = zero.iter().map(|x| (x - m0).powi(2)).sum::<f64>() / (zero.len() - 1) as f64;
            (mean(one) - m0).powi(2) / var0
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn adaptation_is_deterministic() {
    let setup = Setup::fig1_faulty();
    let spec = spec(3, 3);
    let s = sampler(&setup, &spec);
    let a = blind_adaptation(&setup, &spec, &s).unwrap();
    let b = blind_adaptation(&setup, &spec, &s).unwrap();
    assert_eq!(a.output.weights, b.output.weights);
    assert_eq!(a.output.labels, b.output.labels);
    assert_eq!(a.output.diagnostics, b.output.diagnostics);
    assert!(a.output.weights.nodes.iter().all(|n| n.threshold.is_finite()));
}

/// Stage-one coefficients inside the loop barely move when message errors
/// are switched off, averaged over 20 seeds.
#[test]
fn stage_one_is_shielded_from_message_errors() {
    let setup = Setup::fig1_faulty();
    let last =
        |d: &[KappaDiagnostic], node: usize| d.iter().rev().find(|x| x.node == node).unwrap().coefficients.clone();
    let n = setup.topology.node_count();
    let mut with = vec![Vec::new(); n];
    let mut without = vec![Vec::new(); n];
    for seed in 0..20 {
        let spec = spec(100 + seed, 5);
        let s = sampler(&setup, &spec);
        let quiet = CalibratedErrorSampler::from_variances(
            s.le_variance().to_vec(),
            vec![0.0; s.me_variance().len()],
            s.reference_powers().to_vec(),
        )
        .unwrap();
        let a = blind_adaptation(&setup, &spec, &s).unwrap().output.diagnostics;
        let b = blind_adaptation(&setup, &spec, &quiet).unwrap().output.diagnostics;
        for j in 0..n {
            with[j].push(last(&a, j));
            without[j].push(last(&b, j));
        }
    }
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let dim = with[j][0].len();
        for k in 0..dim {
            let ma = with[j].iter().map(|v| v[k]).sum::<f64>() / 20.0;
            let mb = without[j].iter().map(|v| v[k]).sum::<f64>() / 20.0;
            worst = worst.max((ma - mb).abs() / mb.abs().max(1e-3));
        }
    }
    println!("largest relative change of mean stage-one coefficient: {worst:.4}");
    assert!(worst <= 0.05, "{worst}");
}

/// Held-out deflection after the label iterations is no worse than after
/// the initial labels, up to twice the paired standard error.
#[test]
fn label_iterations_do_not_hurt_deflection() {
    let setup = Setup::fig1_faulty();
    let mut diffs = Vec::new();
    for seed in 0..20 {
        let s0 = spec(200 + seed, 0);
        let s5 = spec(200 + seed, 5);
        let sampler = sampler(&setup, &s0);
        let w0 = blind_adaptation(&setup, &s0, &sampler).unwrap().output.weights;
        let w5 = blind_adaptation(&setup, &s5, &sampler).unwrap().output.weights;
        let d0 = held_out_deflection(&setup, &sampler, &w0, 200 + seed);
        let d5 = held_out_deflection(&setup, &sampler, &w5, 200 + seed);
        diffs.push(d5 - d0);
    }
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let se =
        (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64 / diffs.len() as f64).sqrt();
    println!("mean deflection change {m:.4} (se {se:.4})");
    assert!(m >= -2.0 * se, "mean change {m} with standard error {se}");
}

#[test]
fn error_free_window_adapts_without_error_flags() {
    let setup = Setup {
        errors: ErrorConfig::error_free(&Topology::fig1()),
        ..Setup::fig1()
    };
    let spec = spec(9, 2);
    let s = sampler(&setup, &spec);
    let run = blind_adaptation(&setup, &spec, &s).unwrap();
    assert!(run.output.me_variance.iter().all(|v| *v == 0.0));
    let rule = run.output.weights.message_rule(&setup.topology).unwrap();
    // The adapted linear rule still converges.
    let gamma = vec![1.0, -0.5, 0.3, 0.0, 2.0];
    let mut ms = MessageState::new(&setup.topology, Averaging::Off);
    for _ in 0..300 {
        iterate(&setup.topology, &rule, &mut ms, &gamma, &mut NoMessageErrors);
    }
    assert!(ms.last_change() < 1e-10);
}
