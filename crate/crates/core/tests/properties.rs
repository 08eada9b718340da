use proptest::prelude::*;
use tamba_core::metrics::{b_min_fde, min_ade, min_fde, miss_rate, top_k, Forecast};
use tamba_core::scenario::{FrameTransform, Scenario};
use tamba_core::synth::{generate_labeled, GeneratorSpec};

const MODES: usize = 6;

fn forecast_case() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<f64>, Vec<[f64; 2]>)> {
    (1usize..12).prop_flat_map(|t| {
        (
            prop::collection::vec(prop::array::uniform2(-20.0f64..20.0), MODES * t),
            prop::collection::vec(0.01f64..1.0, MODES),
            prop::collection::vec(prop::array::uniform2(-20.0f64..20.0), t),
        )
            .prop_map(|(traj, w, gt)| {
                let s: f64 = w.iter().sum();
                (traj, w.iter().map(|v| v / s).collect(), gt)
            })
    })
}

proptest! {
    #[test]
    fn errors_do_not_grow_with_k((traj, pi, gt) in forecast_case()) {
        let f = Forecast::new(&traj, &pi).unwrap();
        for k in 2..=MODES {
            prop_assert!(min_ade(&f, &gt, k).unwrap() <= min_ade(&f, &gt, k - 1).unwrap());
            prop_assert!(min_fde(&f, &gt, k).unwrap() <= min_fde(&f, &gt, k - 1).unwrap());
        }
        let batch = [(f, &gt[..])];
        prop_assert!(miss_rate(&batch, 1).unwrap() >= miss_rate(&batch, MODES).unwrap());
    }

    #[test]
    fn confidence_penalty_is_bounded((traj, pi, gt) in forecast_case(), k in 1usize..=MODES) {
        let f = Forecast::new(&traj, &pi).unwrap();
        let gap = b_min_fde(&f, &gt, k).unwrap() - min_fde(&f, &gt, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&gap));
    }

    #[test]
    fn metrics_ignore_rigid_motion(
        (traj, pi, gt) in forecast_case(),
        ox in -50.0f64..50.0,
        oy in -50.0f64..50.0,
        heading in -3.1f64..3.1,
    ) {
        let tf = FrameTransform { origin: [ox, oy], heading };
        let mv = |v: &[[f64; 2]]| v.iter().map(|&p| tf.apply_point(p)).collect::<Vec<_>>();
        let (traj2, gt2) = (mv(&traj), mv(&gt));
        let (f, g) = (Forecast::new(&traj, &pi).unwrap(), Forecast::new(&traj2, &pi).unwrap());
        for k in [1, MODES] {
            prop_assert!((min_ade(&f, &gt, k).unwrap() - min_ade(&g, &gt2, k).unwrap()).abs() < 1e-9);
            prop_assert!((min_fde(&f, &gt, k).unwrap() - min_fde(&g, &gt2, k).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_is_sorted_by_weight(w in prop::collection::vec(0.0f64..1.0, 1..10), k in 1usize..10) {
        prop_assume!(k <= w.len());
        let idx = top_k(&w, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        for p in idx.windows(2) {
            prop_assert!(w[p[0]] > w[p[1]] || (w[p[0]] == w[p[1]] && p[0] < p[1]));
        }
        let worst_kept = idx.iter().map(|&i| w[i]).fold(f64::INFINITY, f64::min);
        prop_assert!((0..w.len()).filter(|i| !idx.contains(i)).all(|i| w[i] <= worst_kept));
    }

    #[test]
    fn frame_transform_round_trips(ox in -1e3f64..1e3, oy in -1e3f64..1e3, h in -10.0f64..10.0, px in -1e3f64..1e3, py in -1e3f64..1e3) {
        let tf = FrameTransform { origin: [ox, oy], heading: h };
        let back = tf.invert_point(tf.apply_point([px, py]));
        prop_assert!((back[0] - px).abs() < 1e-9 && (back[1] - py).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenes_survive_json(seed in any::<u64>()) {
        let s = generate_labeled(seed, &GeneratorSpec::default()).unwrap();
        let back = Scenario::from_json(&s.to_json(), "round trip").unwrap();
        prop_assert_eq!(back, s);
    }
}
