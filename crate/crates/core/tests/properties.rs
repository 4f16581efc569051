use num_complex::Complex64;
use proptest::prelude::*;

use edgecl::coreset::{herding_select, kmeans_select, random_select, select_exemplars, ClassFeatures, HerdingForm};
use edgecl::csi_sim::{generate_sequence, sample_packet_times, CsiLayout, CsiSequence, PerturbationConfig, SceneSpec, UserProfile};
use edgecl::harness::{compute_metrics, AccuracyMatrix};
use edgecl::model::softmax;
use edgecl::preprocess::{conjugate_multiply, normalize, preprocess_sequence};
use edgecl::storage::{read_sequences, write_sequences, DatasetMeta};
use edgecl::train::{sam_step, ImportanceVector};

fn complex() -> impl Strategy<Value = Complex64> {
    (-10.0f64..10.0, -10.0f64..10.0).prop_map(|(a, b)| Complex64::new(a, b))
}

fn points(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), n)
}

fn quad(t: &[f64]) -> edgecl::Result<(f64, Vec<f64>)> {
    Ok((0.5 * t.iter().map(|x| x * x).sum::<f64>(), t.to_vec()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn common_phase_cancels(h in prop::collection::vec(complex(), 6), phi in 0.0f64..std::f64::consts::TAU) {
        let layout = CsiLayout { n_subcarriers: 3, n_tx: 1, n_rx: 2 };
        let rot = Complex64::from_polar(1.0, phi);
        let turned: Vec<Complex64> = h.iter().map(|v| v * rot).collect();
        let a = conjugate_multiply(&h, &layout).unwrap();
        let b = conjugate_multiply(&turned, &layout).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn normalize_is_scale_invariant_and_bounded(s in prop::collection::vec(complex(), 2..40), k in 0.01f64..100.0) {
        let a = normalize(&s);
        let scaled: Vec<Complex64> = s.iter().map(|v| v * k).collect();
        let b = normalize(&scaled);
        let max = a.iter().map(|v| v.norm()).fold(0.0, f64::max);
        prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).norm() < 1e-9);
            prop_assert!(x.re.is_finite() && x.im.is_finite());
        }
    }

    #[test]
    fn preprocessing_ignores_packet_phase(seed in any::<u64>(), class in 0usize..10) {
        let scene = SceneSpec::desk().build().unwrap();
        let user = UserProfile::new(seed % 7, 10, PerturbationConfig::default()).unwrap();
        let seq = generate_sequence(&scene, &user, class, seed).unwrap();
        let mut turned = seq.clone();
        for n in 0..seq.len() {
            let rot = Complex64::from_polar(1.0, (seed.wrapping_mul(n as u64 + 1) % 6283) as f64 / 1000.0);
            for v in &mut turned.samples[n * seq.l_h..(n + 1) * seq.l_h] {
                *v *= rot;
            }
        }
        let a = preprocess_sequence(&seq, &scene.layout(), scene.duration, 16).unwrap();
        let b = preprocess_sequence(&turned, &scene.layout(), scene.duration, 16).unwrap();
        for (x, y) in a.x.data.iter().zip(&b.x.data) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_and_finite_sequences_never_give_nan(vals in prop::collection::vec(-1e3f64..1e3, 4 * 5 * 2), zero in any::<bool>()) {
        let layout = CsiLayout { n_subcarriers: 2, n_tx: 1, n_rx: 2 };
        let samples = vals
            .chunks(2)
            .map(|c| if zero { Complex64::new(0.0, 0.0) } else { Complex64::new(c[0], c[1]) })
            .collect();
        let seq = CsiSequence { timestamps: vec![0.1, 0.2, 0.3, 0.4, 0.5], samples, l_h: 4, label: Some(0) };
        let x = preprocess_sequence(&seq, &layout, 1.0, 4).unwrap();
        prop_assert!(x.x.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn packet_times_sorted_inside_window(seed in any::<u64>(), rate in 1.0f64..200.0) {
        let t = sample_packet_times(2.0, rate, seed);
        prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(t.iter().all(|&x| (0.0..=2.0).contains(&x)));
    }

    #[test]
    fn softmax_is_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 2..12), c in -200.0f64..200.0, eta in 1.0f64..10.0) {
        let a = softmax(&z, eta);
        let moved: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = softmax(&moved, eta);
        prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_grows_with_temperature(z in prop::collection::vec(-10.0f64..10.0, 2..10), e1 in 1.0f64..5.0, de in 0.0f64..5.0) {
        let lo = softmax(&z, e1).entropy();
        let hi = softmax(&z, e1 + de).entropy();
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn zero_radius_sam_is_plain_descent(theta in prop::collection::vec(-10.0f64..10.0, 1..8), alpha in 1e-4f64..1.0) {
        let mut a = theta.clone();
        sam_step(&mut a, quad, alpha, 0.0).unwrap();
        for (x, t) in a.iter().zip(&theta) {
            prop_assert_eq!(x.to_bits(), (t - alpha * t).to_bits());
        }
    }

    #[test]
    fn gradient_direction_maximizes_linearized_loss(
        theta in prop::collection::vec(-5.0f64..5.0, 3),
        dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 100),
        eps in 1e-5f64..1e-3,
    ) {
        let g_norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(g_norm > 1e-3);
        let loss = |t: &[f64]| 0.5 * t.iter().map(|x| x * x).sum::<f64>();
        let best: Vec<f64> = theta.iter().map(|t| t + eps * t / g_norm).collect();
        for d in dirs {
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-9 {
                continue;
            }
            let other: Vec<f64> = theta.iter().zip(&d).map(|(t, x)| t + eps * x / n).collect();
            prop_assert!(loss(&best) >= loss(&other) - 1e-9);
        }
    }

    #[test]
    fn drift_penalty_zero_at_anchor_and_increasing(anchor in prop::collection::vec(-3.0f64..3.0, 1..6), v in 0.01f64..5.0, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let imp = ImportanceVector::new(vec![v; anchor.len()], anchor.clone()).unwrap();
        prop_assert_eq!(imp.penalty(&anchor), 0.0);
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(far - near > 1e-9);
        let at = |d: f64| {
            let mut t = anchor.clone();
            t[0] += d;
            imp.penalty(&t)
        };
        prop_assert!(at(far) > at(near));
        prop_assert!(at(-far) > at(-near));
    }

    #[test]
    fn kmeans_selection_distinct_and_monotone(pts in points(3..25, 3), m in 1usize..4, seed in any::<u64>()) {
        let m = m.min(pts.len());
        let out = kmeans_select(&ClassFeatures::from_points(pts.clone()), m, seed).unwrap();
        let mut sel = out.selected.clone();
        sel.sort();
        sel.dedup();
        prop_assert_eq!(sel.len(), m);
        prop_assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn herding_without_replacement(pts in points(2..20, 2), m in 1usize..20, form in prop_oneof![Just(HerdingForm::Mean), Just(HerdingForm::Sum)]) {
        let class = ClassFeatures::from_points(pts.clone());
        let m = m.min(pts.len() - 1);
        let picks = herding_select(&class, &[0], m, form).unwrap();
        prop_assert_eq!(picks.len(), m);
        prop_assert!(!picks.contains(&0));
        let mut s = picks.clone();
        s.sort();
        s.dedup();
        prop_assert_eq!(s.len(), m);
    }

    #[test]
    fn hybrid_selection_returns_budget(pts in points(30..31, 4), budget in 1usize..15, beta in 0.0f64..=1.0, seed in any::<u64>()) {
        let class = ClassFeatures::from_points(pts);
        let picks = select_exemplars(&class, budget, beta, HerdingForm::Mean, seed).unwrap();
        let mut s = picks.clone();
        s.sort();
        s.dedup();
        prop_assert_eq!(s.len(), budget);
        let r = random_select(30, budget, seed).unwrap();
        prop_assert_eq!(r.len(), budget);
    }

    #[test]
    fn retained_accuracy_means_nonnegative_forgetting(diag in prop::collection::vec(0.0f64..=1.0, 1..6), seed in any::<u64>()) {
        // each column only decreases from its diagonal: forgetting >= 0
        let k = diag.len();
        let mut r = AccuracyMatrix::new();
        let mut state = seed;
        let mut cols = diag.clone();
        for p in 0..k {
            for c in cols.iter_mut().take(p) {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *c *= 0.8 + 0.2 * ((state >> 11) as f64 / (1u64 << 53) as f64);
            }
            r.push_row(cols[..=p].to_vec()).unwrap();
        }
        let m = compute_metrics(&r).unwrap();
        prop_assert!(m.forgetting >= 0.0);
        let back = AccuracyMatrix::from_csv(&r.to_csv()).unwrap();
        prop_assert_eq!(compute_metrics(&back).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trip_within_f32(seed in any::<u64>(), per in 1usize..3) {
        let scene = SceneSpec::desk().build().unwrap();
        let user = UserProfile::new(seed % 5, 3, PerturbationConfig::default()).unwrap();
        let d = edgecl::csi_sim::generate_domain(2, &scene, &user, per, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let refs: Vec<&CsiSequence> = d.entries.iter().collect();
        write_sequences(dir.path(), &DatasetMeta::for_domain(&d), &refs).unwrap();
        let (meta, back) = read_sequences(dir.path()).unwrap();
        prop_assert_eq!(meta.entry_count, d.len());
        for (a, b) in d.entries.iter().zip(&back) {
            prop_assert_eq!(&a.timestamps, &b.timestamps);
            prop_assert_eq!(a.label, b.label);
            for (x, y) in a.samples.iter().zip(&b.samples) {
                prop_assert!((x - y).norm() <= 1e-6 * (1.0 + x.norm()));
            }
        }
    }
}
