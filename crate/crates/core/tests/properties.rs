use cascades::delay::Delay;
use cascades::engine::{
    e_step, log_likelihood, BaselineRate, BaselineSpec, EventStream, KernelComponent, ModelSpec, ParentScope,
};
use cascades::event::{Dataset, Event, IngestOptions, Mark, MarkSchema};
use cascades::fertility::{regularized_alpha, Fertility};
use cascades::sim::simulate;
use cascades::transition::{fit_categorical, CategoricalMatrix, DirichletPrior, MarkPrior, Transition};
use proptest::prelude::*;

fn label_model(base: f64, alpha: f64, rate: f64, labels: usize) -> ModelSpec {
    ModelSpec {
        baseline: BaselineSpec {
            rate: BaselineRate::Homogeneous { rate: base },
            marks: MarkPrior::uniform_labels(labels),
            refit_marks: true,
        },
        components: vec![KernelComponent {
            name: "k".into(),
            fertility: Fertility::constant(alpha),
            transition: Transition::Categorical(CategoricalMatrix::uniform(labels)),
            delay: Delay::exponential(rate),
            scope: ParentScope::Any,
            transition_group: None,
        }],
        normalize: false,
        epsilon: 1e-6,
    }
}

fn events_strategy() -> impl Strategy<Value = (Vec<(f64, u32)>, f64)> {
    (1.0f64..50.0).prop_flat_map(|horizon| {
        (prop::collection::vec((0.0..horizon, 0u32..3), 0..60), Just(horizon))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_are_distributions((raw, horizon) in events_strategy(), alpha in 0.0f64..0.9, rate in 0.1f64..5.0) {
        let events = raw.iter().map(|&(t, l)| Event::new(t, Mark::Label(l))).collect();
        let data = Dataset::new(events, horizon, MarkSchema::Labels { count: 3 }).unwrap();
        let stream = EventStream::from(&data);
        let model = label_model(0.7, alpha, rate, 3);
        let z = e_step(&model, &stream).unwrap();
        for i in 0..z.len() {
            let total: f64 = z.row(i).map(|(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(z.row(i).all(|(_, w)| (0.0..=1.0 + 1e-15).contains(&w)));
        }
        let ll = log_likelihood(&model, &stream).unwrap();
        prop_assert!((ll - z.log_likelihood()).abs() <= 1e-10 * ll.abs().max(1.0));
    }

    #[test]
    fn dataset_round_trips_through_json_lines((raw, horizon) in events_strategy()) {
        let events = raw.iter().map(|&(t, l)| Event::new(t, Mark::Label(l))).collect();
        let data = Dataset::new(events, horizon, MarkSchema::Labels { count: 3 }).unwrap();
        let mut buf = Vec::new();
        data.write(&mut buf).unwrap();
        let back = Dataset::read(buf.as_slice(), &IngestOptions::default()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn regularized_rates_preserve_total_count(
        pairs in prop::collection::vec((0u32..20, 0.1f64..10.0), 1..12),
        lambda in 0.0f64..=1.0,
    ) {
        let n: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let m: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let alpha = regularized_alpha(&n, &m, lambda).unwrap();
        let expected: f64 = alpha.iter().zip(&m).map(|(a, m)| a * m).sum();
        let observed: f64 = n.iter().sum();
        prop_assert!((expected - observed).abs() <= 1e-9 * observed.max(1.0));
    }

    #[test]
    fn shrunk_rows_are_stochastic_and_between_data_and_prior(
        counts in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), 3),
        c in 0.0f64..100.0,
    ) {
        let dir = vec![0.2, 0.3, 0.5];
        let prior = DirichletPrior::shared(dir.clone(), 3, c);
        let fitted = fit_categorical(&counts, Some(&prior)).unwrap();
        for (row, n) in fitted.rows.iter().zip(&counts) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let total: f64 = n.iter().sum();
            if total > 0.0 {
                for j in 0..3 {
                    let (lo, hi) = {
                        let a = n[j] / total;
                        (a.min(dir[j]), a.max(dir[j]))
                    };
                    prop_assert!(row[j] >= lo - 1e-12 && row[j] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn delay_cdf_is_monotone_and_matches_survival(
        shape in 0.2f64..6.0,
        rate in 0.1f64..5.0,
        mut xs in prop::collection::vec(0.0f64..20.0, 2..20),
    ) {
        xs.sort_by(f64::total_cmp);
        for d in [Delay::exponential(rate), Delay::Gamma { shape, rate }] {
            let cdf: Vec<f64> = xs.iter().map(|x| d.cdf(*x)).collect();
            prop_assert!(cdf.windows(2).all(|w| w[1] >= w[0]));
            for x in &xs {
                prop_assert!((d.cdf(*x) + d.survival(*x) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simulation_is_reproducible_and_in_window(seed in any::<u64>(), alpha in 0.0f64..0.8) {
        let model = label_model(1.0, alpha, 2.0, 3);
        let schema = MarkSchema::Labels { count: 3 };
        let a = simulate(&model, &schema, 20.0, seed).unwrap();
        let b = simulate(&model, &schema, 20.0, seed).unwrap();
        prop_assert_eq!(&a.dataset, &b.dataset);
        prop_assert!(a.dataset.events().iter().all(|e| e.t >= 0.0 && e.t <= 20.0));
        prop_assert!(a.dataset.events().windows(2).all(|w| w[0].t <= w[1].t));
        for (i, p) in a.forest.parent.iter().enumerate() {
            if let Some((j, _)) = p {
                prop_assert!(*j < i);
            }
        }
    }
}
