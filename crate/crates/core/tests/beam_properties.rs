use lgloc::beam::{field_amplitude, intensity, rotation_angle, BeamGeometry, ModeSpec, Pose};
use proptest::prelude::*;

fn geom() -> BeamGeometry {
    BeamGeometry::new(0.633, 77.48).unwrap()
}

fn mode_strategy() -> impl Strategy<Value = ModeSpec> {
    prop_oneof![
        (-2i32..=2, 0u32..=2).prop_map(|(l, p)| ModeSpec::lg(l, p)),
        Just(ModeSpec::equal_superposition(&[(0, 0), (2, 0)]).unwrap()),
        Just(ModeSpec::equal_superposition(&[(1, 0), (-1, 1)]).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn translation_covariance_is_exact(
        mode in mode_strategy(),
        a in -200.0f64..200.0, b in -200.0f64..200.0, c in -40000.0f64..40000.0,
        u in -300.0f64..300.0, v in -300.0f64..300.0,
    ) {
        let g = geom();
        let (x, y) = (a + u, b + v);
        let moved = field_amplitude(&mode, &g, &Pose::new(a, b, c), x, y);
        let origin = field_amplitude(&mode, &g, &Pose::new(0.0, 0.0, c), x - a, y - b);
        prop_assert_eq!(moved, origin);
    }

    #[test]
    fn single_modes_are_even_in_z(
        l in -2i32..=2, p in 0u32..=2,
        z in 0.0f64..60000.0, u in -300.0f64..300.0, v in -300.0f64..300.0,
    ) {
        let g = geom();
        let m = ModeSpec::lg(l, p);
        let plus = intensity(&m, &g, &Pose::new(0.0, 0.0, z), u, v);
        let minus = intensity(&m, &g, &Pose::new(0.0, 0.0, -z), u, v);
        prop_assert!((plus - minus).abs() <= 1e-13 * plus.abs().max(1e-300));
    }

    #[test]
    fn rotation_mode_turns_and_rescales(dz in -60000.0f64..60000.0, r in 0.0f64..2.0, phi in 0.0f64..std::f64::consts::TAU) {
        let g = geom();
        let m = ModeSpec::equal_superposition(&[(0, 0), (2, 0)]).unwrap();
        let w = g.width_at(dz);
        let s = w / g.waist();
        let theta = rotation_angle(&m, &g, dz).unwrap();
        // pose z_e = -dz puts the observation plane at dz
        let (x, y) = (r * w * phi.cos(), r * w * phi.sin());
        let at = intensity(&m, &g, &Pose::new(0.0, 0.0, -dz), x, y);
        // undo the clockwise turn and the scaling
        let (c, sn) = (theta.cos(), theta.sin());
        let (xf, yf) = ((c * x - sn * y) / s, (sn * x + c * y) / s);
        let focal = intensity(&m, &g, &Pose::new(0.0, 0.0, 0.0), xf, yf) / (s * s);
        let peak = 2.0 / (std::f64::consts::PI * w * w);
        prop_assert!((at - focal).abs() <= 1e-6 * focal.abs().max(1e-3 * peak));
    }
}
