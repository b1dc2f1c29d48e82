mod common;

use atlasseg::em::{em_fit, init_params, EmSettings};
use atlasseg::likelihood::data_term;
use common::*;

fn tight(var_floor: f64) -> EmSettings {
    EmSettings {
        max_iter: 10_000,
        tol: Some(1e-12),
        var_floor,
    }
}

#[test]
fn data_term_matches_naive_formula() {
    let (img, atlas) = em_instance(3);
    let init = init_params(&img, &atlas, 1e-6).unwrap();
    let lib = data_term(&img, &atlas, &init).unwrap();
    let naive = naive_data_term(img.data(), &atlas.class_priors(), &init.mu, &init.var);
    assert!((lib - naive).abs() < 1e-9 * naive.abs());
}

#[test]
fn em_never_increases_the_data_term() {
    for seed in 0..20 {
        let (img, atlas) = em_instance(seed);
        let init = init_params(&img, &atlas, 1e-6).unwrap();
        let st = em_fit(&img, &atlas, &init, &tight(1e-6)).unwrap();
        for w in st.data_term_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn em_reaches_the_grid_search_minimum() {
    for seed in 0..4 {
        let (img, atlas) = em_instance(seed);
        let init = init_params(&img, &atlas, 1e-6).unwrap();
        let st = em_fit(&img, &atlas, &init, &tight(1e-6)).unwrap();
        assert!(st.converged);
        let em = *st.data_term_history.last().unwrap();
        let (grid, _) = grid_search_two_class(&img, &atlas.class_priors(), 1e-6);
        assert!((em - grid).abs() <= 1e-6, "seed {seed}: em {em} grid {grid}");
    }
}
