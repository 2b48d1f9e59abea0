use nalgebra::{DVector, Vector2, Vector3};
use proptest::prelude::*;

use geofit3d::camera::rodrigues;
use geofit3d::par::Exec;
use geofit3d::report::{read_alpha_csv, write_alpha_csv};
use geofit3d::{Landmark, Landmarks2D};

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO
}

proptest! {
    #[test]
    fn rotations_are_orthonormal(x in -4.0f64..4.0, y in -4.0f64..4.0, z in -4.0f64..4.0) {
        let r = rodrigues(&Vector3::new(x, y, z));
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn landmark_csv_round_trips(points in prop::collection::btree_map(0usize..10_000, (finite(), finite()), 1..40)) {
        let entries: Vec<Landmark> = points
            .iter()
            .map(|(&vertex, &(x, y))| Landmark { vertex, position: Vector2::new(x, y) })
            .collect();
        let l = Landmarks2D::new(entries).unwrap();
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let back = Landmarks2D::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn alpha_csv_round_trips(values in prop::collection::vec(finite(), 0..60)) {
        let a = DVector::from_vec(values);
        let mut buf = Vec::new();
        write_alpha_csv(&a, &mut buf).unwrap();
        prop_assert_eq!(read_alpha_csv(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn parallel_map_keeps_order(items in prop::collection::vec(any::<i64>(), 0..500)) {
        let f = |x: &i64| x.wrapping_mul(31).rotate_left(7);
        prop_assert_eq!(Exec::Parallel.map(&items, f), Exec::Sequential.map(&items, f));
    }
}
