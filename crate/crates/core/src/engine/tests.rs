use super::*;
use crate::delay::Delay;
use crate::event::{FeatureSet, Mark};
use crate::fertility::Fertility;
use crate::sim::simulate;
use crate::transition::{CategoricalMatrix, FeaturePrior, MarkPrior, Transition};

fn flat(rate: f64, marks: MarkPrior) -> ModelSpec {
    ModelSpec::baseline_only(BaselineRate::Homogeneous { rate }, marks)
}

fn component(fertility: Fertility, transition: Transition, delay: Delay) -> KernelComponent {
    KernelComponent {
        name: "c".into(),
        fertility,
        transition,
        delay,
        scope: ParentScope::Any,
        transition_group: None,
    }
}

fn labels(count: usize, times_labels: &[(f64, u32)], horizon: f64) -> EventStream {
    let events = times_labels.iter().map(|&(t, l)| Event::new(t, Mark::Label(l))).collect();
    let d = Dataset::new(events, horizon, MarkSchema::Labels { count }).unwrap();
    EventStream::from(&d)
}

fn one_label_model(base: f64, alpha: f64, rate: f64) -> ModelSpec {
    let mut m = flat(base, MarkPrior::uniform_labels(1));
    m.components.push(component(Fertility::constant(alpha), Transition::Identity, Delay::exponential(rate)));
    m
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn intensity_examples() {
    let m = flat(2.0, MarkPrior::uniform_labels(2));
    assert_eq!(intensity(&m, &[], 0.5, &Mark::Label(1)), 1.0);

    let mut m = flat(1.0, MarkPrior::uniform_labels(2));
    m.components.push(component(Fertility::constant(1.0), Transition::Identity, Delay::exponential(1.0)));
    let history = [Event::new(1.0, Mark::Label(0))];
    assert_eq!(intensity(&m, &history, 2.0, &Mark::Label(1)), 0.5);
    let v = intensity(&m, &history, 2.0, &Mark::Label(0));
    assert!(close(v, 0.5 + (-1.0f64).exp(), 1e-15));
}

#[test]
fn log_likelihood_examples() {
    let m = flat(2.0, MarkPrior::uniform_labels(1));
    let s = labels(1, &[(0.5, 0)], 1.0);
    assert!(close(log_likelihood(&m, &s).unwrap(), -2.0 + 2f64.ln(), 1e-15));
    let empty = labels(1, &[], 3.0);
    assert_eq!(log_likelihood(&m, &empty).unwrap(), -6.0);

    let s = labels(2, &[(0.5, 0), (0.7, 1), (1.5, 0)], 2.0);
    let base = flat(2.0, MarkPrior::uniform_labels(2));
    let mut null = base.clone();
    null.components.push(component(Fertility::constant(0.0), Transition::Identity, Delay::exponential(1.0)));
    assert_eq!(log_likelihood(&base, &s).unwrap(), log_likelihood(&null, &s).unwrap());
}

#[test]
fn zero_intensity_names_event() {
    let m = flat(1.0, MarkPrior::Categorical { probs: vec![1.0, 0.0] });
    let s = labels(2, &[(0.5, 0), (0.7, 1)], 1.0);
    match log_likelihood(&m, &s) {
        Err(Error::ZeroIntensity { event: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(e_step(&m, &s), Err(Error::ZeroIntensity { event: 1, .. })));
}

#[test]
fn e_step_ratio_examples() {
    // baseline 1; parent at 0 with α h = 3 at the child
    let m = one_label_model(1.0, 3.0 / (-1.0f64).exp(), 1.0);
    let s = labels(1, &[(0.0, 0), (1.0, 0)], 1.0);
    let z = e_step(&m, &s).unwrap();
    let first: Vec<_> = z.row(0).collect();
    assert_eq!(first, vec![(Cause::Baseline, 1.0)]);
    let second: Vec<_> = z.row(1).collect();
    assert!(close(second[0].1, 0.25, 1e-14) && close(second[1].1, 0.75, 1e-14), "{second:?}");
}

#[test]
fn e_step_matches_hand_table() {
    // two labels, categorical transition, exponential delay, three events
    let theta = vec![vec![0.9, 0.1], vec![0.3, 0.7]];
    let mut m = flat(0.5, MarkPrior::Categorical { probs: vec![0.6, 0.4] });
    m.components.push(component(
        Fertility::Multiplicative { weights: vec![0.8, 1.0, 1.5] },
        Transition::Categorical(CategoricalMatrix { rows: theta.clone(), prior: None }),
        Delay::exponential(2.0),
    ));
    m.epsilon = 0.0;
    let s = labels(2, &[(0.2, 0), (0.5, 1), (1.1, 1)], 2.0);
    let z = e_step(&m, &s).unwrap();
    let alpha = [0.8, 1.2];
    let h = |d: f64| 2.0 * (-2.0 * d).exp();
    let table = [
        vec![0.5 * 0.6],
        vec![0.5 * 0.4, alpha[0] * theta[0][1] * h(0.3)],
        vec![0.5 * 0.4, alpha[0] * theta[0][1] * h(0.9), alpha[1] * theta[1][1] * h(0.6)],
    ];
    for (i, row) in table.iter().enumerate() {
        let total: f64 = row.iter().sum();
        let got: Vec<f64> = z.row(i).map(|r| r.1).collect();
        assert_eq!(got.len(), row.len());
        for (g, v) in got.iter().zip(row) {
            assert!((g - v / total).abs() < 1e-12, "event {i}: {got:?}");
        }
        assert!(close(z.intensity(i), total, 1e-14));
    }
}

#[test]
fn m_step_examples() {
    let m = flat(3.0, MarkPrior::uniform_labels(1));
    let s = labels(1, &[(1.0, 0), (2.0, 0), (3.0, 0), (4.0, 0), (5.0, 0)], 10.0);
    let z = e_step(&m, &s).unwrap();
    let next = m_step(&m, &s, &z).unwrap();
    assert_eq!(next.baseline.rate, BaselineRate::Homogeneous { rate: 0.5 });
    assert_eq!(m_step(&m, &s, &z).unwrap(), next);

    // every child owes itself to the event two time units earlier
    let m = one_label_model(1.0, 1.0, 1.0);
    let s = labels(1, &[(0.0, 0), (2.0, 0), (4.0, 0), (6.0, 0)], 1000.0);
    let rows = (0..4)
        .map(|i| {
            if i == 0 {
                vec![(Cause::Baseline, 1.0)]
            } else {
                vec![(Cause::Kernel { parent: i - 1, component: 0 }, 1.0)]
            }
        })
        .collect();
    let z = Responsibilities::from_rows(rows);
    let next = m_step(&m, &s, &z).unwrap();
    match next.components[0].delay {
        Delay::Exponential { rate } => assert!(close(rate, 0.5, 1e-9), "{rate}"),
        ref d => panic!("{d:?}"),
    }
}

#[test]
fn periodic_exposures_and_integral() {
    let r = BaselineRate::PeriodicStep { period: 4.0, rates: vec![1.0, 3.0] };
    assert_eq!(r.exposures(0.0, 4.0), vec![2.0, 2.0]);
    assert_eq!(r.exposures(1.0, 7.0), vec![3.0, 3.0]);
    assert_eq!(r.exposures(2.5, 3.0), vec![0.0, 0.5]);
    assert_eq!(r.integral(1.0, 7.0), 12.0);
    assert_eq!(r.bucket(5.9), 0);
    assert_eq!(r.bucket(6.0), 1);
}

fn feature_instance(seed: u64) -> (ModelSpec, EventStream) {
    let prior = FeaturePrior::new(vec![0.3, 0.6, 0.5]).unwrap();
    let mut m = flat(1.5, prior.clone().into());
    m.components.push(component(
        Fertility::Multiplicative { weights: vec![0.4, 1.3, 0.8, 1.1] },
        Transition::GammaMix { gamma: 0.4, prior },
        Delay::exponential(1.5),
    ));
    let sim = simulate(&m, &MarkSchema::features(3), 80.0, seed).unwrap();
    (m, EventStream::from(&sim.dataset))
}

#[test]
fn rows_sum_to_one_and_bound_is_tight() {
    for seed in 0..5 {
        let (m, s) = feature_instance(seed);
        let z = e_step(&m, &s).unwrap();
        let windows = m.windows();
        let ev = Evaluator::new(&m, &s, &windows);
        let mut bound = -ev.compensator();
        for i in 0..s.len() {
            let row: Vec<_> = z.row(i).collect();
            let sum: f64 = row.iter().map(|r| r.1).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (c, w) in row {
                bound += w * (ev.cause_value(i, c) / w).ln();
            }
        }
        let ll = log_likelihood(&m, &s).unwrap();
        assert!(close(bound, ll, 1e-9), "{bound} vs {ll}");
    }
}

#[test]
fn truncation_changes_little() {
    for seed in 0..5 {
        let (mut m, s) = feature_instance(seed);
        let truncated = log_likelihood(&m, &s).unwrap();
        m.epsilon = 0.0;
        let exact = log_likelihood(&m, &s).unwrap();
        assert!((truncated - exact).abs() < 1e-4 * exact.abs(), "{truncated} vs {exact}");
    }
}

#[test]
fn normalize_examples() {
    let s = labels(1, &[(1.0, 0), (2.0, 0)], 4.0);
    let m = flat(1.0, MarkPrior::uniform_labels(1));
    // Λ = 4 = 2N: rates halve
    assert_eq!(normalize(&m, &s).unwrap().baseline.rate, BaselineRate::Homogeneous { rate: 0.5 });
    let m = flat(0.5, MarkPrior::uniform_labels(1));
    assert_eq!(normalize(&m, &s).unwrap(), m);
}

#[test]
fn normalize_hits_event_count_and_never_lowers_likelihood() {
    for seed in 0..20 {
        let (mut m, s) = feature_instance(seed);
        m.baseline.rate = BaselineRate::Homogeneous { rate: 0.3 + 0.2 * seed as f64 };
        let before = log_likelihood(&m, &s).unwrap();
        let scaled = normalize(&m, &s).unwrap();
        let windows = scaled.windows();
        let lambda = Evaluator::new(&scaled, &s, &windows).compensator();
        assert!(close(lambda, s.scored_count() as f64, 1e-10));
        assert!(log_likelihood(&scaled, &s).unwrap() >= before - 1e-9 * before.abs());
    }
}

#[test]
fn fit_zero_iterations_reports_initial_model() {
    let (m, s) = feature_instance(1);
    let r = fit(&m, &s, &FitOptions { max_iters: 0, tol: 1e-8 }, None).unwrap();
    assert_eq!(r.train_ll.len(), 1);
    assert_eq!(r.model, m);
    assert_eq!(r.train_ll[0], log_likelihood(&m, &s).unwrap());
}

#[test]
fn fit_is_monotone_and_deterministic() {
    let (m, s) = feature_instance(2);
    let mut start = m.clone();
    start.baseline.rate = BaselineRate::Homogeneous { rate: 0.7 };
    start.components[0].delay = Delay::exponential(0.4);
    let opts = FitOptions { max_iters: 40, tol: 1e-10 };
    let a = fit(&start, &s, &opts, None).unwrap();
    let b = fit(&start, &s, &opts, None).unwrap();
    assert_eq!(a, b);
    for w in a.train_ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
    }
    assert!(a.train_ll.last().unwrap() > &a.train_ll[0]);
}

#[test]
fn fit_near_truth_barely_moves() {
    let (m, s) = feature_instance(3);
    let r = fit(&m, &s, &FitOptions { max_iters: 200, tol: 1e-7 }, None).unwrap();
    assert!(r.converged);
    let gain = (r.train_ll.last().unwrap() - r.train_ll[0]) / r.train_ll[0].abs();
    assert!(gain < 0.02, "{gain}");
}

#[test]
fn normalized_fit_keeps_compensator_at_count() {
    let (mut m, s) = feature_instance(4);
    m.normalize = true;
    let r = fit(&m, &s, &FitOptions { max_iters: 10, tol: 0.0 }, None).unwrap();
    let windows = r.model.windows();
    let lambda = Evaluator::new(&r.model, &s, &windows).compensator();
    assert!(close(lambda, s.scored_count() as f64, 1e-10));
}

#[test]
fn conditioned_stream_scores_only_target() {
    let d = Dataset::new(
        (1..=10).map(|i| Event::new(i as f64, Mark::Label(0))).collect(),
        10.0,
        MarkSchema::Labels { count: 1 },
    )
    .unwrap();
    let (train, test) = d.split(0.5).unwrap();
    let s = EventStream::conditioned(&train, &test).unwrap();
    assert_eq!(s.len(), 10);
    assert_eq!(s.scored_count(), 5);
    let m = flat(1.0, MarkPrior::uniform_labels(1));
    // baseline only: Σ log 1 − 5
    assert_eq!(log_likelihood(&m, &s).unwrap(), -5.0);
}

#[test]
fn fast_path_examples() {
    let mut m = one_label_model(1.0, 1.0, 1.0);
    m.epsilon = 0.0;
    let s = labels(1, &[(1.0, 0), (2.0, 0)], 3.0);
    let f = fast_estep_exponential(&m, &s).unwrap();
    assert_eq!(f.triggered[0], vec![0.0]);
    assert!(close(f.triggered[1][0], (-1.0f64).exp(), 1e-15));
    let single = labels(1, &[(1.0, 0)], 3.0);
    assert_eq!(fast_estep_exponential(&m, &single).unwrap().triggered[0], vec![0.0]);
}

#[test]
fn fast_path_rejects_other_delays() {
    let mut m = one_label_model(1.0, 1.0, 1.0);
    m.components[0].delay = Delay::Gamma { shape: 2.0, rate: 1.0 };
    let s = labels(1, &[(1.0, 0)], 3.0);
    assert!(fast_estep_exponential(&m, &s).is_err());
    let f = Dataset::new(
        vec![Event::new(1.0, Mark::Features(FeatureSet::new(1, [0]).unwrap()))],
        2.0,
        MarkSchema::features(1),
    )
    .unwrap();
    assert!(fast_estep_exponential(&one_label_model(1.0, 1.0, 1.0), &EventStream::from(&f)).is_err());
}

#[test]
fn fast_path_matches_direct_on_simulated_labels() {
    let theta = vec![vec![0.6, 0.3, 0.1], vec![0.0, 0.5, 0.5], vec![0.2, 0.2, 0.6]];
    let mut m = flat(0.8, MarkPrior::Categorical { probs: vec![0.5, 0.3, 0.2] });
    m.baseline.rate = BaselineRate::PeriodicStep { period: 5.0, rates: vec![0.4, 1.2] };
    m.components.push(component(
        Fertility::Multiplicative { weights: vec![0.3, 1.0, 1.4, 0.7] },
        Transition::Categorical(CategoricalMatrix { rows: theta, prior: None }),
        Delay::exponential(3.0),
    ));
    m.components.push(component(
        Fertility::constant(0.2),
        Transition::Prior { prior: MarkPrior::uniform_labels(3) },
        Delay::exponential(0.2),
    ));
    m.epsilon = 0.0;
    let sim = simulate(&m, &MarkSchema::Labels { count: 3 }, 150.0, 8).unwrap();
    let s = EventStream::from(&sim.dataset);
    assert!(s.len() > 100);
    let direct = e_step(&m, &s).unwrap();
    let fast = fast_estep_exponential(&m, &s).unwrap();
    let oracle = ExpStats::from_responsibilities(&m, &s, &direct);
    assert!(fast.stats.max_relative_difference(&oracle) < 1e-9);
    assert!(close(fast.log_likelihood, direct.log_likelihood(), 1e-12));
    for i in 0..s.len() {
        assert!(close(fast.intensity[i], direct.intensity(i), 1e-12));
        let y = s.events()[i].mark.label().unwrap();
        let base = m.baseline.rate.rate_at(s.events()[i].t) * m.baseline.marks.prob(&s.events()[i].mark);
        assert!(close(fast.triggered[i][y] + base, direct.intensity(i), 1e-12));
    }
}

#[test]
fn model_spec_round_trips_through_json() {
    let (m, _) = feature_instance(0);
    let text = serde_json::to_string(&m).unwrap();
    let back: ModelSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, m);
}

#[test]
fn shared_transition_group_is_fit_once() {
    let mut m = flat(0.5, MarkPrior::uniform_labels(2));
    let t = Transition::Categorical(CategoricalMatrix::uniform(2));
    for rate in [2.0, 0.3] {
        let mut c = component(Fertility::constant(0.3), t.clone(), Delay::exponential(rate));
        c.transition_group = Some("shared".into());
        m.components.push(c);
    }
    let sim = simulate(&m, &MarkSchema::Labels { count: 2 }, 200.0, 1).unwrap();
    let s = EventStream::from(&sim.dataset);
    let r = fit(&m, &s, &FitOptions { max_iters: 5, tol: 0.0 }, None).unwrap();
    assert_eq!(r.model.components[0].transition, r.model.components[1].transition);
    assert_eq!(r.model.transition_groups(), vec![vec![0, 1]]);
}

#[test]
fn degenerate_gamma_delay_is_kept() {
    // one possible parent-child pair: the shape has nothing to fit
    let mut m = flat(0.5, MarkPrior::uniform_labels(1));
    m.components.push(component(Fertility::constant(0.5), Transition::Identity, Delay::Gamma { shape: 2.0, rate: 1.0 }));
    let s = labels(1, &[(1.0, 0), (2.0, 0)], 3.0);
    let fitted = m_step(&m, &s, &e_step(&m, &s).unwrap()).unwrap();
    assert_eq!(fitted.components[0].delay, m.components[0].delay);
    let report = fit(&m, &s, &FitOptions { max_iters: 5, tol: 0.0 }, None).unwrap();
    assert!(report.train_ll.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs()));
}
