use dsatrack_core::correlation::{correlation_map, flatten_grid};
use dsatrack_core::eval::metrics::precision_success;
use dsatrack_core::head::BBox;
use dsatrack_core::image::CropWindow;
use dsatrack_core::numerics::{matmul, softmax, Tensor};
use dsatrack_core::semantic::{normalize_edges, DegreeMode};
use dsatrack_core::tracker::update_interval;
use proptest::prelude::*;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn graph() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..=16).prop_flat_map(|n| (Just(n), prop::collection::vec(any::<bool>(), n * n)))
}

fn adjacency(n: usize, bits: &[bool]) -> Tensor {
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            if bits[i * n + j] {
                e[i * n + j] = 1.0;
                e[j * n + i] = 1.0;
            }
        }
    }
    Tensor::new(&[n, n], e).unwrap()
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..200.0, 0.0f64..200.0, 2.0f64..80.0, 2.0f64..80.0).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
}

proptest! {
    #[test]
    fn correlation_is_bilinear(q in tensor(&[5, 4, 2]), k in tensor(&[3, 4, 2]), a in 0.1f64..3.0) {
        let base = correlation_map(&q, &k).unwrap();
        let scaled = correlation_map(&q.map(|v| v * a), &k.map(|v| v * a)).unwrap();
        let want = base.head_major().map(|v| v * a * a);
        prop_assert!(scaled.head_major().max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn correlation_permutes_with_templates(q in tensor(&[4, 3, 2]), k in tensor(&[5, 3, 2]), shift in 1usize..5) {
        let perm: Vec<usize> = (0..5).map(|j| (j + shift) % 5).collect();
        let kp = k.select(0, &perm).unwrap();
        let base = correlation_map(&q, &k).unwrap();
        let moved = correlation_map(&q, &kp).unwrap();
        for i in 0..4 {
            for (j, &src) in perm.iter().enumerate() {
                for h in 0..2 {
                    prop_assert_eq!(moved.get(i, j, h), base.get(i, src, h));
                }
            }
        }
    }

    #[test]
    fn grid_flattening_round_trips(c in tensor(&[3, 2, 2, 2, 2])) {
        let flat = flatten_grid(&c).unwrap();
        prop_assert_eq!(flat.unflatten(3, 2, 2, 2).unwrap(), c);
    }

    #[test]
    fn adjacency_fixes_the_degree_vector((n, bits) in graph()) {
        let e = adjacency(n, &bits);
        let a = normalize_edges(&e, DegreeMode::SelfLoop).unwrap().matrix;
        let deg: Vec<f64> = (0..n).map(|i| 1.0 + (0..n).map(|j| e.data()[i * n + j]).sum::<f64>()).collect();
        for i in 0..n {
            // A d^(1/2) = d^(1/2) and A is symmetric.
            let row: f64 = (0..n).map(|j| a.data()[i * n + j] * deg[j].sqrt()).sum();
            prop_assert!((row - deg[i].sqrt()).abs() < 1e-12);
            for j in 0..n {
                prop_assert_eq!(a.data()[i * n + j], a.data()[j * n + i]);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(&[6, 9])) {
        let p = softmax(&x, 1).unwrap();
        for row in p.data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..64, k in 1usize..64, n in 1usize..64, seed in any::<u64>()) {
        let mut rng = dsatrack_core::RngStream::new(seed);
        let a = Tensor::new(&[m, k], (0..m * k).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(&[k, n], (0..k * n).map(|_| rng.normal()).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                prop_assert!((c.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_coordinates_invert(b in bbox(), target in bbox(), factor in 1.5f64..5.0) {
        let win = CropWindow::around(&b, factor, 128).unwrap();
        let back = win.to_frame(&win.to_crop(&target));
        for (p, q) in back.to_array().iter().zip(target.to_array()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_curves_are_monotone(pairs in prop::collection::vec((bbox(), bbox()), 1..30)) {
        let (pred, gt): (Vec<BBox>, Vec<BBox>) = pairs.into_iter().unzip();
        let r = precision_success(&pred, &gt).unwrap();
        prop_assert!(r.precision.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.success.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((0.0..=1.0).contains(&r.success_auc));
    }
}

#[test]
fn update_interval_is_non_decreasing() {
    let v: Vec<usize> = (1..=700).map(update_interval).collect();
    assert!(v.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!((v[0], v[99], v[100], v[499], v[500]), (5, 5, 10, 80, 160));
}
