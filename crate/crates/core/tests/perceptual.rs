use corrobust::graph::{Graph, Mode};
use corrobust::model::{build_model, cross_entropy_rows, ModelGraph, ModelSpec};
use corrobust::perceptual::*;
use corrobust::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_model(seed: u64) -> ModelGraph {
    let mut spec = ModelSpec::desk([3, 8, 8], 4);
    spec.widths = vec![4, 8];
    build_model(&spec, seed).unwrap()
}

fn rand_batch(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f32> {
    Tensor::new(vec![b, 3, 8, 8], (0..b * 192).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// Two-pixel linear classifier: logits = x W + c.
fn linear_model(w: [[f32; 2]; 2], c: [f32; 2]) -> ModelGraph {
    let mut g = Graph::<f32>::new();
    let x = g.input("input", &[2]).unwrap();
    let y = g.labels("labels").unwrap();
    let wn = g
        .param(
            "w",
            Tensor::new(vec![2, 2], vec![w[0][0], w[0][1], w[1][0], w[1][1]]).unwrap(),
        )
        .unwrap();
    let cn = g.param("c", Tensor::new(vec![2], c.to_vec()).unwrap()).unwrap();
    let h = g.matmul(x, wn).unwrap();
    let h = g.add(h, cn).unwrap();
    g.tap("logits", h).unwrap();
    let l = g.softmax_cross_entropy(h, y).unwrap();
    g.set_loss(l).unwrap();
    ModelGraph::from_graph(g, &["input"]).unwrap()
}

#[test]
fn self_distance_is_zero_and_symmetric() {
    let m = desk_model(1);
    let cfg = LpipsConfig::reference(m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_batch(&mut rng, 4);
    let b = rand_batch(&mut rng, 4);
    assert!(lpips(&cfg, &a, &a).unwrap().iter().all(|&d| d == 0.0));
    let ab = lpips(&cfg, &a, &b).unwrap();
    let ba = lpips(&cfg, &b, &a).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert!(*x > 0.0);
        assert!((x - y).abs() <= 1e-9 * x.max(1.0), "{x} vs {y}");
    }
}

#[test]
fn input_layer_with_unit_weight_is_euclidean() {
    let cfg = LpipsConfig::identity(desk_model(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_batch(&mut rng, 3);
    let b = rand_batch(&mut rng, 3);
    let d = lpips(&cfg, &a, &b).unwrap();
    for (i, &di) in d.iter().enumerate() {
        let direct: f64 = a
            .sample(i)
            .iter()
            .zip(b.sample(i))
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((di - direct).abs() < 1e-6 * direct, "{di} vs {direct}");
    }
}

#[test]
fn scaling_weights_by_four_doubles_distance() {
    let m = desk_model(3);
    let base = LpipsConfig::reference(m.clone()).unwrap();
    let scaled = LpipsConfig::new(
        m,
        base.layers.clone(),
        base.weights.iter().map(|w| 4.0 * w).collect(),
        true,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_batch(&mut rng, 3);
    let b = rand_batch(&mut rng, 3);
    for (x, y) in lpips(&base, &a, &b)
        .unwrap()
        .iter()
        .zip(lpips(&scaled, &a, &b).unwrap())
    {
        assert!((2.0 * x - y).abs() < 1e-9 * y, "{x} {y}");
    }
}

#[test]
fn config_and_shape_validation() {
    let m = desk_model(4);
    assert!(LpipsConfig::new(m.clone(), vec![], vec![], true).is_err());
    assert!(LpipsConfig::new(m.clone(), vec![1], vec![0.0], true).is_err());
    assert!(LpipsConfig::new(m.clone(), vec![1], vec![-1.0], true).is_err());
    assert!(LpipsConfig::new(m.clone(), vec![9], vec![1.0], true).is_err());
    let cfg = LpipsConfig::reference(m).unwrap();
    let a = Tensor::<f32>::zeros(&[2, 3, 8, 8]);
    let b = Tensor::<f32>::zeros(&[3, 3, 8, 8]);
    assert!(lpips(&cfg, &a, &b).is_err());
}

#[test]
fn zero_steps_return_zero_perturbation() {
    let m = desk_model(5);
    let cfg = LpipsConfig::reference(m.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_batch(&mut rng, 2);
    let mut lpa = LpaConfig::new(0.5, 0.1);
    lpa.steps = 0;
    let d = lpa_attack(&m, &cfg, &x, &[0, 1], &lpa).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn inactive_constraint_is_plain_normalized_ascent() {
    let m = desk_model(6);
    let cfg = LpipsConfig::reference(m.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_batch(&mut rng, 3);
    let y = [0, 2, 3];
    let lpa = LpaConfig {
        eps: f64::INFINITY,
        lambdas: vec![1.0],
        steps: 5,
        step_size: 0.3,
    };
    let got = lpa_attack(&m, &cfg, &x, &y, &lpa).unwrap();

    let mut delta = Tensor::<f32>::zeros(x.shape());
    for _ in 0..5 {
        let xa = x.add(&delta).unwrap();
        let (_, mut g, _) = m.loss_and_grads(&xa, &y, &[], &["input"], Mode::Eval).unwrap();
        let g = g.take("input").unwrap();
        for i in 0..3 {
            let n = g.sample(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            let (xi, gi) = (x.sample(i).to_vec(), g.sample(i).to_vec());
            for (j, d) in delta.sample_mut(i).iter_mut().enumerate() {
                if n > 0.0 {
                    *d += 0.3 * gi[j] / n;
                }
                *d = d.clamp(-xi[j], 1.0 - xi[j]);
            }
        }
    }
    for (a, b) in got.data().iter().zip(delta.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn perturbed_inputs_stay_in_box_and_radius() {
    let m = desk_model(7);
    let cfg = LpipsConfig::reference(m.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_batch(&mut rng, 4);
    let y = [0, 1, 2, 3];
    let lpa = LpaConfig::new(0.05, 0.5);
    let d = lpa_attack(&m, &cfg, &x, &y, &lpa).unwrap();
    let xa = x.add(&d).unwrap();
    assert!(xa.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for dist in lpips(&cfg, &x, &xa).unwrap() {
        assert!(dist <= 0.05 + 1e-9, "{dist}");
    }
}

#[test]
fn matches_grid_search_on_two_pixel_linear_model() {
    let m = linear_model([[2.0, -1.0], [-1.5, 3.0]], [0.1, -0.2]);
    let cfg = LpipsConfig::identity(m.clone()).unwrap();
    let eps = 0.05f64;
    let lpa = LpaConfig::new(eps, 0.01);
    for (px, label) in [([0.3f32, 0.6f32], 1usize), ([0.5, 0.2], 0), ([0.02, 0.97], 1)] {
        let x = Tensor::new(vec![1, 2], px.to_vec()).unwrap();
        let d = lpa_attack(&m, &cfg, &x, &[label], &lpa).unwrap();
        let got = cross_entropy_rows(&m.logits(&x.add(&d).unwrap(), Mode::Eval).unwrap(), &[label])[0] as f64;

        // exhaustive search over the feasible set at resolution 1e-3
        let mut best = f64::MIN;
        let steps = (eps / 1e-3).round() as i32;
        for i in -steps..=steps {
            for j in -steps..=steps {
                let (a, b) = (i as f64 * 1e-3, j as f64 * 1e-3);
                let (u, v) = (px[0] as f64 + a, px[1] as f64 + b);
                if a * a + b * b > eps * eps || !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    continue;
                }
                let l0 = 2.0 * u - 1.5 * v + 0.1;
                let l1 = -u + 3.0 * v - 0.2;
                let (ly, lo) = if label == 0 { (l0, l1) } else { (l1, l0) };
                let mx = ly.max(lo);
                let ce = mx + ((ly - mx).exp() + (lo - mx).exp()).ln() - ly;
                best = best.max(ce);
            }
        }
        assert!((got - best).abs() <= 0.05 * best, "x {px:?}: lpa {got} vs grid {best}");
    }
}

#[test]
fn bisection_finds_feasible_scale() {
    let cfg = LpipsConfig::identity(desk_model(8)).unwrap();
    let x = Tensor::<f32>::full(&[1, 3, 8, 8], 0.5);
    let delta = Tensor::<f32>::full(&[1, 3, 8, 8], 0.1);
    // ‖delta‖ = 0.1 * sqrt(192); the radius 0.5 is met at s = 0.5 / 1.3856
    let s = radial_bisection(&cfg, &x, &delta, 0.5, 10).unwrap()[0];
    let exact = 0.5 / (0.1 * 192f32.sqrt());
    assert!(s <= exact && exact - s < 1.0 / 1024.0 + 1e-6, "{s} vs {exact}");
}

#[test]
fn robust_accuracy_at_zero_radius_is_clean_accuracy() {
    let m = desk_model(9);
    let cfg = LpipsConfig::reference(m.clone()).unwrap();
    let data = corrobust::data::gen_synthetic(&corrobust::data::SyntheticSpec {
        classes: 4,
        size: 8,
        samples_per_class: 5,
        seed: 0,
    })
    .unwrap();
    let mut lpa = LpaConfig::new(0.0, 0.2);
    lpa.steps = 3;
    let curve = lpips_robust_accuracy(&m, &cfg, &data, &[0.0, 10.0], &lpa).unwrap();
    let clean = corrobust::metrics::accuracy(&m, &data).unwrap();
    assert_eq!(curve[0], (0.0, clean));
    assert!(curve[1].1 <= clean);
    assert_eq!(curve_csv(&curve).lines().next(), Some("eps,accuracy"));
}
