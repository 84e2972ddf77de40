use mnn::distance::{estimate_distances, prepare_mask};
use mnn::observation::{Observation, ObservationSet};
use mnn::synth::{generate, rng_from_seed, ModelConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn user_distances_at_n_1000() {
    let data = generate(&ModelConfig::square(1000, 2, 0.0, 0)).unwrap();
    let obs = data.observations.clone().with_rho_hint(Some(1.0));
    let est = estimate_distances(&prepare_mask(&obs).unwrap(), 2).unwrap();
    let err = max_abs_diff(&est.user, &data.factors.user_distances());
    // Calibrated on this seed: 0.2507.
    assert!(err < 0.26, "{err}");
}

#[test]
fn practical_mode_tracks_centered_mode() {
    let data = generate(&ModelConfig::square(400, 2, 0.0, 2)).unwrap();
    let centered = estimate_distances(
        &prepare_mask(&data.observations.clone().with_rho_hint(Some(1.0))).unwrap(),
        2,
    )
    .unwrap();
    let raw_mask = prepare_mask(&data.observations).unwrap();
    assert!(!raw_mask.centered);
    let raw = estimate_distances(&raw_mask, 2).unwrap();
    for (a, b) in [(&raw.user, &centered.user), (&raw.item, &centered.item)] {
        let rel = (a - b).mapv(|v| v * v).sum().sqrt() / b.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 0.25, "{rel}");
    }
    let truth = data.factors.user_distances();
    let (e_raw, e_cen) = (max_abs_diff(&raw.user, &truth), max_abs_diff(&centered.user, &truth));
    assert!((e_raw / e_cen - 1.0).abs() < 0.25, "{e_raw} vs {e_cen}");
}

#[test]
fn permuting_users_permutes_distances() {
    let data = generate(&ModelConfig::square(80, 2, 0.0, 4)).unwrap();
    let obs = &data.observations;
    let base = estimate_distances(&prepare_mask(obs).unwrap(), 2).unwrap();
    let mut rng = rng_from_seed(12);
    for _ in 0..3 {
        let mut perm: Vec<usize> = (0..80).collect();
        perm.shuffle(&mut rng);
        // Row i of the permuted set is original row perm[i].
        let mut inverse = vec![0; 80];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let entries = obs
            .entries()
            .iter()
            .map(|e| Observation { row: inverse[e.row], ..*e })
            .collect();
        let permuted = ObservationSet::new(80, 80, entries).unwrap();
        let est = estimate_distances(&prepare_mask(&permuted).unwrap(), 2).unwrap();
        for i in 0..80 {
            for j in 0..80 {
                assert!((est.user[[i, j]] - base.user[[perm[i], perm[j]]]).abs() < 1e-8);
            }
        }
        assert!(max_abs_diff(&est.item, &base.item) < 1e-8);
    }
}
