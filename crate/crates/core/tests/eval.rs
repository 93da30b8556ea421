use msdamil::data::{generate_synthetic_corpus, ClassLabel, CorpusConfig, Slide};
use msdamil::eval::{
    compute_metrics, evaluate_corpus, evaluate_predictor, format_predictions, heat_color, normalize_attention,
    parse_predictions, patch_baseline_probability, render_attention_heatmap, slide_probability, BagSampling, HeatCell,
    Predictor, BACKGROUND, DEFAULT_THRESHOLD,
};
use msdamil::model::ModelConfig;
use msdamil::pipeline::{domain_probe_accuracy, run_modes, select_alpha, ProbeConfig, SplitView};
use msdamil::train::{patch_train, stage1_train, stage2_train, Checkpoint, Mode, TrainConfig};
use msdamil::Error;
use proptest::prelude::*;

use ClassLabel::{Negative, Positive};

/// Independent oracle: exponentiate the mean logs directly.
fn brute_force(probs: &[[f64; 2]]) -> f64 {
    let n = probs.len() as f64;
    let p1 = (probs.iter().map(|p| p[1].ln()).sum::<f64>() / n).exp();
    let p0 = (probs.iter().map(|p| p[0].ln()).sum::<f64>() / n).exp();
    p1 / (p1 + p0)
}

fn pair(p: f64) -> [f64; 2] {
    [1.0 - p, p]
}

#[test]
fn slide_probability_examples() {
    let constant = slide_probability(&[[0.2, 0.8]; 5]).unwrap();
    assert!((constant - 0.8).abs() < 1e-12);
    let two = slide_probability(&[[0.1, 0.9], [0.6, 0.4]]).unwrap();
    assert!((two - 0.710102).abs() < 1e-6, "{two}");
    assert!((slide_probability(&[[0.35, 0.65]]).unwrap() - 0.65).abs() < 1e-12);
}

#[test]
fn patch_baseline_examples() {
    assert!((patch_baseline_probability(&[[0.5, 0.5]; 7]).unwrap() - 0.5).abs() < 1e-12);
    let three = patch_baseline_probability(&[[0.1, 0.9], [0.1, 0.9], [0.9, 0.1]]).unwrap();
    // (0.081^(1/3)) / (0.081^(1/3) + 0.009^(1/3)); 0.67535 only with rounded intermediates.
    assert!((three - 0.675334).abs() < 1e-6, "{three}");
    assert!((three - 0.67535).abs() < 5e-5);
}

#[test]
fn empty_lists_cannot_be_aggregated() {
    assert!(matches!(slide_probability(&[]), Err(Error::Argument(_))));
    assert!(matches!(patch_baseline_probability(&[]), Err(Error::Argument(_))));
}

#[test]
fn tiny_probabilities_are_floored_before_the_log() {
    let p = slide_probability(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
    assert!(p.is_finite() && p > 0.0 && p < 1e-5);
}

fn bag_list() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.001f64..0.999).prop_map(pair), 1..40)
}

proptest! {
    #[test]
    fn aggregation_matches_brute_force(probs in bag_list()) {
        let got = slide_probability(&probs).unwrap();
        prop_assert!((got - brute_force(&probs)).abs() < 1e-9);
        prop_assert_eq!(got, patch_baseline_probability(&probs).unwrap());
    }

    #[test]
    fn aggregation_ignores_bag_order(probs in bag_list(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = probs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = slide_probability(&probs).unwrap();
        let b = slide_probability(&shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn constant_bags_give_their_own_probability(q in 0.001f64..0.999, n in 1usize..60) {
        let got = slide_probability(&vec![pair(q); n]).unwrap();
        prop_assert!((got - q).abs() <= 1e-9);
    }

    #[test]
    fn raising_one_bag_never_lowers_the_slide(probs in bag_list(), pick in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        let i = pick.index(probs.len());
        let mut raised = probs.clone();
        let p = raised[i][1];
        raised[i] = pair(p + (0.999 - p) * bump);
        prop_assert!(slide_probability(&raised).unwrap() >= slide_probability(&probs).unwrap() - 1e-12);
    }

    #[test]
    fn normalised_attention_spans_unit_interval(values in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let norm = normalize_attention(&values);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert_eq!(norm.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(norm.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
        prop_assert!(norm.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn metrics_of_perfect_predictions() {
    let m = compute_metrics(&[(0.9, Positive), (0.1, Negative), (0.7, Positive)], DEFAULT_THRESHOLD).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!((m.precision, m.recall), (1.0, 1.0));
}

#[test]
fn metrics_hand_counted_example() {
    let preds = [(0.9, Positive), (0.2, Negative), (0.6, Negative), (0.4, Positive)];
    let m = compute_metrics(&preds, DEFAULT_THRESHOLD).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall), (0.5, 0.5, 0.5));
    assert_eq!(
        (m.true_positives, m.false_positives, m.false_negatives, m.true_negatives),
        (1, 1, 1, 1)
    );
}

#[test]
fn zero_threshold_recalls_every_positive() {
    let m = compute_metrics(&[(0.0, Positive), (0.3, Negative), (0.01, Positive)], 0.0).unwrap();
    assert_eq!(m.recall, 1.0);
}

#[test]
fn zero_denominators_are_flagged() {
    let m = compute_metrics(&[(0.1, Negative), (0.2, Negative)], DEFAULT_THRESHOLD).unwrap();
    assert_eq!((m.precision, m.recall), (0.0, 0.0));
    assert!(m.precision_undefined && m.recall_undefined);
    assert!(m.to_string().contains("precision\t0 (undefined)"));
    assert!(matches!(compute_metrics(&[], 0.5), Err(Error::Argument(_))));
    assert!(matches!(compute_metrics(&[(0.5, Positive)], 1.5), Err(Error::Argument(_))));
}

fn cell(scale: usize, pos: (usize, usize), attention: f64) -> HeatCell {
    HeatCell {
        scale,
        position: Some(pos),
        attention,
    }
}

#[test]
fn uniform_attention_renders_blue() {
    let cells = [cell(1, (0, 0), 0.25), cell(1, (0, 1), 0.25), cell(1, (1, 0), 0.25), cell(1, (1, 1), 0.25)];
    let maps = render_attention_heatmap(&cells, (2, 2), 3).unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].values, vec![0.0; 4]);
    assert!(maps[0].rgb.chunks(3).all(|px| px == [0, 0, 255]));
}

#[test]
fn two_instances_render_red_and_blue() {
    let maps = render_attention_heatmap(&[cell(1, (0, 0), 0.8), cell(1, (0, 2), 0.2)], (1, 3), 2).unwrap();
    let m = &maps[0];
    assert_eq!((m.width, m.height), (6, 2));
    let px = |x: usize, y: usize| &m.rgb[(y * m.width + x) * 3..(y * m.width + x) * 3 + 3];
    assert_eq!(px(0, 0), [255, 0, 0]);
    assert_eq!(px(1, 1), [255, 0, 0]);
    assert_eq!(px(2, 0), BACKGROUND);
    assert_eq!(px(4, 1), [0, 0, 255]);
    assert_eq!(heat_color(0.5), [128, 0, 128]);
}

#[test]
fn one_raster_per_scale() {
    let cells = [cell(1, (0, 0), 0.1), cell(2, (0, 0), 0.3), cell(1, (0, 1), 0.2), cell(2, (0, 1), 0.4)];
    let maps = render_attention_heatmap(&cells, (1, 2), 1).unwrap();
    assert_eq!(maps.iter().map(|m| m.scale).collect::<Vec<_>>(), vec![1, 2]);
    // Normalised over the whole bag, so scale 1 holds the minimum and scale 2 the maximum.
    assert_eq!(maps[0].values[0], 0.0);
    assert_eq!(maps[1].values[1], 1.0);
}

#[test]
fn later_instances_overwrite_shared_cells() {
    let maps = render_attention_heatmap(&[cell(1, (0, 0), 0.9), cell(1, (0, 0), 0.1)], (1, 1), 1).unwrap();
    assert_eq!(maps[0].rgb, vec![0, 0, 255]);
}

#[test]
fn heatmap_needs_geometry() {
    let no_pos = HeatCell {
        scale: 1,
        position: None,
        attention: 0.5,
    };
    assert!(matches!(render_attention_heatmap(&[no_pos], (1, 1), 1), Err(Error::Data(_))));
    assert!(matches!(render_attention_heatmap(&[cell(1, (3, 0), 1.0)], (2, 2), 1), Err(Error::Data(_))));
    assert!(matches!(render_attention_heatmap(&[], (2, 2), 1), Err(Error::Argument(_))));
    assert!(matches!(render_attention_heatmap(&[cell(1, (0, 0), 1.0)], (2, 2), 0), Err(Error::Argument(_))));
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        patch_size: 12,
        conv1_channels: 2,
        conv2_channels: 3,
        kernel_size: 3,
        embed_dim: 6,
        attention_hidden: 4,
        domain_hidden: 5,
    }
}

fn corpus() -> Vec<Slide> {
    generate_synthetic_corpus(&CorpusConfig {
        slides_per_class: 3,
        patch_size: 12,
        regions_per_slide: 10,
        bag_size: 5,
        max_bags: 2,
        tumor_rate: 0.4,
        seed: 21,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 2,
        bag_size: 5,
        max_bags: 2,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn msdamil_needs_a_multiscale_checkpoint() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let cfg = train_cfg();
    let out = stage1_train(&refs, 1, &tiny_model(), &cfg, true, |_, _| Ok(())).unwrap();
    let single = Checkpoint::from_stage1(&out.model, Mode::Damil, 2, &cfg).unwrap();
    let err = evaluate_corpus(&single, &refs, Mode::Msdamil, &BagSampling::from(&cfg)).unwrap_err();
    assert!(matches!(err, Error::IncompatibleCheckpoint { .. }));
    assert!(err.to_string().contains("expected msdamil"), "{err}");

    let s1 = stage2_train(&refs, &[out.model.extractor.clone()], &[1], &tiny_model(), &cfg, |_, _| Ok(())).unwrap();
    let one_scale = Checkpoint::from_multiscale(&s1.model, 1, &cfg).unwrap();
    assert!(matches!(
        evaluate_corpus(&one_scale, &refs, Mode::Msdamil, &BagSampling::from(&cfg)),
        Err(Error::IncompatibleCheckpoint { .. })
    ));
    let err = evaluate_corpus(&single, &refs, Mode::Mil, &BagSampling::from(&cfg)).unwrap_err();
    assert!(err.to_string().contains("expected mil checkpoint"), "{err}");
}

#[test]
fn reported_metrics_match_emitted_records() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let cfg = train_cfg();
    let extractors: Vec<_> = [1, 2]
        .iter()
        .map(|&s| stage1_train(&refs, s, &tiny_model(), &cfg, true, |_, _| Ok(())).unwrap().model.extractor)
        .collect();
    let out = stage2_train(&refs, &extractors, &[1, 2], &tiny_model(), &cfg, |_, _| Ok(())).unwrap();
    let ckpt = Checkpoint::from_multiscale(&out.model, 2, &cfg).unwrap();
    let eval = evaluate_corpus(&ckpt, &refs, Mode::Msdamil, &BagSampling::from(&cfg)).unwrap();

    let text = format_predictions(&eval);
    let records = parse_predictions(&text).unwrap();
    assert_eq!(records.len(), slides.len());
    let scored: Vec<(f64, ClassLabel)> = records.iter().map(|(_, p, l)| (*p, *l)).collect();
    assert_eq!(compute_metrics(&scored, DEFAULT_THRESHOLD).unwrap(), eval.metrics);
    assert!(text.lines().skip(1).all(|l| l.ends_with("\tmsdamil")));

    for pred in &eval.predictions {
        let again = slide_probability(&pred.bag_probs()).unwrap();
        assert!((again - pred.probability).abs() <= 1e-6);
        for bag in &pred.bags {
            let mass = bag.attention_mass();
            assert_eq!(mass.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
            assert!((mass.values().sum::<f64>() - 1.0).abs() < 1e-5);
            assert_eq!(bag.heat_cells().len(), bag.attentions.len());
        }
    }
    let again = evaluate_corpus(&ckpt, &refs, Mode::Msdamil, &BagSampling::from(&cfg)).unwrap();
    assert_eq!(again, eval);
}

#[test]
fn patch_baseline_scores_whole_slides() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let cfg = train_cfg();
    let out = patch_train(&refs, 1, &tiny_model(), &cfg, |_, _| Ok(())).unwrap();
    let ckpt = Checkpoint::from_patch(&out.model, 2, &cfg);
    let eval = evaluate_corpus(&ckpt, &refs, Mode::Patch, &BagSampling::from(&cfg)).unwrap();
    assert_eq!(eval.predictions.len(), slides.len());
    assert!(eval.predictions.iter().all(|p| p.bags.is_empty() && (0.0..=1.0).contains(&p.probability)));
    let predictor = Predictor::Patch(out.model);
    let region_probs = {
        let batch = msdamil::Tensor::stack(
            &slides[0].regions.iter().map(|r| r.patches[&1].to_tensor::<f32>()).collect::<Vec<_>>(),
        )
        .unwrap();
        match &predictor {
            Predictor::Patch(m) => m.predict(&batch).unwrap(),
            _ => unreachable!(),
        }
    };
    let direct = patch_baseline_probability(&region_probs).unwrap();
    assert!((direct - eval.predictions[0].probability).abs() < 1e-9);
    assert!(predictor.predict_bag(&msdamil::data::extract_bags(&slides[0], 5, 1, 0).unwrap()[0]).is_err());
}

#[test]
fn malformed_prediction_files_are_rejected() {
    assert!(matches!(parse_predictions("id\tp\n"), Err(Error::Data(_))));
    let bad = "slide_id\tP_pos\ttrue_label\tmode\ns1\tnope\tpositive\tmil\n";
    assert!(matches!(parse_predictions(bad), Err(Error::Data(_))));
}

#[test]
fn alpha_selection_contract() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let cfg = train_cfg();
    assert!(matches!(select_alpha(&refs, &refs, 1, &tiny_model(), &cfg, &[]), Err(Error::Config(_))));
    assert!(matches!(select_alpha(&refs, &[], 1, &tiny_model(), &cfg, &[0.5, 1.0]), Err(Error::Config(_))));
    let one = select_alpha(&refs, &[], 1, &tiny_model(), &cfg, &[2.0]).unwrap();
    assert_eq!(one.alpha, 2.0);
    let sel = select_alpha(&refs[..4], &refs[4..], 1, &tiny_model(), &cfg, &[0.5, 4.0]).unwrap();
    assert_eq!(sel.scores.len(), 2);
    let best = sel.scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let first_best = sel.scores.iter().find(|s| s.1 == best).unwrap().0;
    assert_eq!(sel.alpha, first_best);
}

#[test]
fn run_modes_reports_every_mode() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let split = SplitView {
        train: &refs[..4],
        val: &refs[4..5],
        test: &refs[5..],
    };
    let reports = run_modes(split, &Mode::ALL, &[1, 2], &tiny_model(), &train_cfg(), &[1.0]).unwrap();
    let modes: Vec<Mode> = reports.iter().map(|r| r.mode).collect();
    assert_eq!(modes, Mode::ALL.to_vec());
    for r in &reports {
        let expected = if r.mode == Mode::Msdamil { 1 } else { 2 };
        assert_eq!(r.evaluations.len(), expected);
        assert!((0.0..=1.0).contains(&r.accuracy));
    }
    assert_eq!(reports[3].alphas.len(), 2);
}

#[test]
fn domain_probe_reports_an_accuracy() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let cfg = train_cfg();
    let ex = stage1_train(&refs, 1, &tiny_model(), &cfg, false, |_, _| Ok(())).unwrap().model.extractor;
    let probe = ProbeConfig::default();
    let a = domain_probe_accuracy(&ex, &refs, &tiny_model(), &cfg, &probe).unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(a, domain_probe_accuracy(&ex, &refs, &tiny_model(), &cfg, &probe).unwrap());
}

#[test]
fn evaluation_uses_the_requested_mode_name() {
    let slides = corpus();
    let refs: Vec<&Slide> = slides.iter().collect();
    let cfg = train_cfg();
    let out = stage1_train(&refs, 2, &tiny_model(), &cfg, false, |_, _| Ok(())).unwrap();
    let pred = Predictor::SingleScale(out.model);
    assert_eq!(pred.scales(), vec![2]);
    let eval = evaluate_predictor(&pred, Mode::Mil, &refs, &BagSampling::from(&cfg)).unwrap();
    assert_eq!(eval.mode, Mode::Mil);
    assert!(eval.predictions.iter().all(|p| p.bags.iter().all(|b| b.instance_scales.iter().all(|&s| s == 2))));
}
