use super::*;
use crate::datagen::{generate_catalog, CatalogSpec};
use crate::features::build_sample;
use crate::imputation::{impute_catalog, ImputationConfig, ImputedPanel};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        heads: 2,
        d_k: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        ffn_dim: 6,
        tau_hidden: 3,
        head_hidden: 5,
        near_horizon: 2,
        far_horizon: 3,
        prediction_horizon: 4,
        dropout: 0.0,
        seed: 11,
    }
}

fn panels() -> Vec<ImputedPanel> {
    let cat = generate_catalog(&CatalogSpec {
        n_articles: 6,
        n_markets: 1,
        n_weeks: 40,
        stockout_rate: 0.1,
        cold_start_share: 0.0,
        ..CatalogSpec::default()
    })
    .unwrap();
    impute_catalog(&cat.panels, &ImputationConfig::default()).unwrap()
}

fn setup() -> (Model<f64>, Vec<Sample<f64>>) {
    let schema = CovariateSchema::new(1, 8, 2, 20, 6).unwrap();
    let model = Model::new(tiny_config(), schema.clone()).unwrap();
    let samples = panels()
        .iter()
        .map(|p| build_sample(p, &schema, 30, 4).unwrap())
        .collect();
    (model, samples)
}

#[test]
fn width_must_match_heads() {
    let schema = CovariateSchema::new(1, 8, 2, 20, 6).unwrap();
    let err = Model::<f64>::new(
        ModelConfig {
            heads: 3,
            ..tiny_config()
        },
        schema,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Schema(_)));
}

#[test]
fn forward_is_deterministic() {
    let (model, samples) = setup();
    for s in &samples {
        assert_eq!(model.predict(s, 4).unwrap(), model.predict(s, 4).unwrap());
    }
    let again = Model::<f64>::new(tiny_config(), model.schema().clone()).unwrap();
    assert_eq!(model.predict(&samples[0], 4).unwrap(), again.predict(&samples[0], 4).unwrap());
}

#[test]
fn discount_sweep_is_monotone() {
    let (model, samples) = setup();
    for s in &samples {
        let heads = model.heads(s, 4).unwrap();
        for k in 0..4 {
            let sweep: Vec<f64> = (0..=14)
                .map(|l| heads.demand(k, 0, l as f64 / 20.0).unwrap())
                .collect();
            assert!(sweep.windows(2).all(|w| w[0] <= w[1]), "{sweep:?}");
            assert!(sweep[0] >= 0.0);
        }
    }
}

#[test]
fn near_and_far_weeks_use_their_own_pair() {
    let (mut model, samples) = setup();
    let before = model.predict(&samples[0], 4).unwrap();
    for id in model.ids_with_prefix(&["far."]) {
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3);
    }
    let after = model.predict(&samples[0], 4).unwrap();
    assert_eq!(before[..2], after[..2]);
    assert_ne!(before[2], after[2]);
    assert_ne!(before[3], after[3]);
}

#[test]
fn future_weeks_are_independent() {
    let (model, samples) = setup();
    let s = &samples[1];
    let base = model.heads(s, 4).unwrap();
    let mut t = s.clone();
    let vd = t.decoder.cols();
    t.decoder.data_mut()[3 * vd..4 * vd].iter_mut().for_each(|v| *v = 0.0);
    t.discounts[3][0] = 0.7;
    let changed = model.heads(&t, 4).unwrap();
    for k in 0..3 {
        assert_eq!(base.base[k], changed.base[k]);
        assert_eq!(base.scale[k], changed.scale[k]);
    }
    assert_ne!(base.base[3], changed.base[3]);
}

#[test]
fn masked_weeks_do_not_influence_outputs() {
    let (model, samples) = setup();
    let mut s = samples[2].clone();
    s.mask[1] = true;
    s.mask[4] = true;
    let base = model.predict(&s, 4).unwrap();
    let v = s.encoder.cols();
    for row in [1, 4] {
        for x in &mut s.encoder.data_mut()[row * v..(row + 1) * v] {
            *x = *x * -3.0 + 1e3;
        }
    }
    assert_eq!(base, model.predict(&s, 4).unwrap());
}

#[test]
fn fully_masked_history_is_reported() {
    let (model, samples) = setup();
    let mut s = samples[0].clone();
    s.mask.iter_mut().for_each(|m| *m = true);
    assert!(matches!(model.predict(&s, 4), Err(Error::AllMasked { .. })));
}

#[test]
fn single_visible_week() {
    let (model, samples) = setup();
    let mut s = samples[0].clone();
    s.mask.iter_mut().for_each(|m| *m = true);
    s.mask[7] = false;
    // only the last week is visible: earlier rows may hold anything
    let a = model.predict(&s, 4).unwrap();
    let v = s.encoder.cols();
    s.encoder.data_mut()[..7 * v].iter_mut().for_each(|x| *x = 0.5);
    assert_eq!(a, model.predict(&s, 4).unwrap());
}

#[test]
fn swapping_weeks_without_positions_is_invisible() {
    let (model, samples) = setup();
    let mut s = samples[3].clone();
    s.mask.iter_mut().for_each(|m| *m = false);
    let v = s.encoder.cols();
    for row in 0..8 {
        s.encoder.data_mut()[row * v + 6] = 0.0;
        s.encoder.data_mut()[row * v + 7] = 0.0;
    }
    let a = model.predict(&s, 4).unwrap();
    let mut t = s.clone();
    let (r1, r2) = (2, 5);
    for c in 0..v {
        t.encoder.data_mut().swap(r1 * v + c, r2 * v + c);
    }
    let b = model.predict(&t, 4).unwrap();
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn layout_mismatch_is_a_schema_error() {
    let (model, samples) = setup();
    let mut s = samples[0].clone();
    s.encoder = Tensor::zeros(vec![9, 8]);
    s.mask = vec![false; 9];
    assert!(matches!(model.predict(&s, 4), Err(Error::Schema(_))));
}

#[test]
fn parameter_names_are_grouped() {
    let (model, _) = setup();
    let all = model.params().len();
    let groups = ["embed.", "encoder.", "near.", "far."];
    let counted: usize = groups.iter().map(|g| model.ids_with_prefix(&[g]).len()).sum();
    assert_eq!(counted, all);
    assert_eq!(model.ids_with_prefix(&["near."]).len(), model.ids_with_prefix(&["far."]).len());
}
