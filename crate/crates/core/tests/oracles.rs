use nalgebra::{DMatrix, DVector};
use openworld::metrics::{auroc, fpr_at_tpr, hungarian_assign};
use openworld::rng::seeded;
use openworld::scoring::threshold_at_tpr;
use openworld::spectral::{linear_probe_error_1d, multiclass_residual, residual, residual_bound, spectral_split, AdjacencyBundle};
use rand::Rng;

fn random_graph(n: usize, rng: &mut impl Rng) -> AdjacencyBundle {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            // sparse-ish weights keep the spectra varied
            let w = if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random::<f64>() };
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        a[(i, i)] += 0.05;
    }
    AdjacencyBundle::from_matrix(a).unwrap()
}

#[test]
fn residual_never_exceeds_bound() {
    let mut rng = seeded(404);
    let mut equal = 0;
    for case in 0..100 {
        let n = rng.random_range(6..12);
        let n_l = rng.random_range(1..n / 2);
        let k = rng.random_range(1..n - n_l);
        let b = random_graph(n, &mut rng);
        let split = spectral_split(&b, k, n_l).unwrap();
        let y = DVector::from_fn(n - n_l, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let r = residual(&split.u_star(), &y).unwrap();
        let bound = residual_bound(&split, &y).unwrap();
        assert!(r <= bound + 1e-8, "case {case}: {r} > {bound}");
        equal += usize::from((r - bound).abs() <= 1e-8);
    }
    eprintln!("residual equals bound in {equal}/100 cases");
}

#[test]
fn one_dimensional_probe_bound() {
    let mut rng = seeded(13);
    for case in 0..50 {
        let n = rng.random_range(8..14);
        let classes = rng.random_range(2..4);
        let b = random_graph(n, &mut rng);
        let split = spectral_split(&b, 1, 0).unwrap();
        let u = split.u_star();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let r = multiclass_residual(&u, &labels, classes).unwrap();
        let e = linear_probe_error_1d(u.as_slice(), &labels, classes).unwrap();
        assert!(r >= 0.5 * e as f64 - 1e-12, "case {case}: R={r}, E={e}");
    }
}

fn pair_count_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in id {
        for b in ood {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

#[test]
fn detection_metrics_match_counting() {
    let mut rng = seeded(77);
    for _ in 0..20 {
        let n = rng.random_range(5..60);
        let m = rng.random_range(5..60);
        // coarse rounding forces ties
        let id: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 20.0).round() / 4.0 + 1.0).collect();
        let ood: Vec<f64> = (0..m).map(|_| (rng.random::<f64>() * 20.0).round() / 4.0).collect();
        assert!((auroc(&id, &ood).unwrap() - pair_count_auroc(&id, &ood)).abs() < 1e-12);
        let lambda = threshold_at_tpr(&id, 0.95).unwrap();
        let above = id.iter().filter(|&&s| s >= lambda).count();
        assert!(above as f64 >= 0.95 * n as f64);
        let fp = ood.iter().filter(|&&s| s >= lambda).count() as f64 / m as f64;
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), fp);
    }
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

fn exhaustive_assign(cost: &DMatrix<f64>) -> f64 {
    let (r, c) = cost.shape();
    let (small, large, rows_small) = if r <= c { (r, c, true) } else { (c, r, false) };
    let mut perms = Vec::new();
    permutations(&mut (0..large).collect(), 0, &mut perms);
    perms
        .iter()
        .map(|p| (0..small).map(|i| if rows_small { cost[(i, p[i])] } else { cost[(p[i], i)] }).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = seeded(5);
    for _ in 0..50 {
        let r = rng.random_range(1..=7);
        let c = rng.random_range(1..=7);
        let cost = DMatrix::from_fn(r, c, |_, _| rng.random_range(-5.0..5.0));
        let got = hungarian_assign(&cost).unwrap().cost;
        assert!((got - exhaustive_assign(&cost)).abs() < 1e-9);
    }
}
