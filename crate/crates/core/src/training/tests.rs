use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{chronological_split, generate_synthetic, SyntheticConfig};
use crate::network::DependencyMode;

fn small_net(k: usize, d_e: usize) -> NetworkConfig {
    NetworkConfig {
        k,
        d_e,
        d_att_tok: 8,
        d_gru: 6,
        d_att_sent: 8,
        heads: 2,
        d_cls: 8,
        dropout: 0.0,
        ..NetworkConfig::default()
    }
}

fn small_splits(num_cases: usize, k: usize, d_e: usize, noise: f64, seed: u64) -> Splits {
    let cases = generate_synthetic(&SyntheticConfig {
        num_cases,
        k,
        d_e,
        sentences: (2, 4),
        tokens: (2, 5),
        noise_std: noise,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    chronological_split(cases, 0.8, 0.1).unwrap()
}

fn leaf_outputs(tape: &mut Tape, rng: &mut ChaCha8Rng, n: usize, k: usize, w: usize) -> Vec<ForwardVars> {
    let m = |tape: &mut Tape, r: usize, c: usize, rng: &mut ChaCha8Rng| {
        tape.leaf(Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(), true)
    };
    (0..n)
        .map(|_| {
            let o_b = m(tape, 1, k, rng);
            let o_a = m(tape, 1, k, rng);
            let views_b = m(tape, k, w, rng);
            let views_a = m(tape, k, w, rng);
            ForwardVars {
                o_b,
                o_a,
                views_b,
                views_a,
                article_views: views_b,
                token_weights: vec![],
                sentence_weights: vec![],
                interaction_weights: vec![],
            }
        })
        .collect()
}

fn oracle_bce(logits: &[f64], targets: &[u8]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in logits.iter().zip(targets) {
        let p = 1.0 / (1.0 + (-x).exp());
        s -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    s / logits.len() as f64
}

#[test]
fn saturated_correct_logits_have_tiny_bce() {
    let splits = small_splits(12, 3, 4, 0.5, 0);
    let cases: Vec<&CaseDocument> = splits.train.iter().take(2).collect();
    let mut tape = Tape::new();
    let outputs: Vec<ForwardVars> = cases
        .iter()
        .map(|c| {
            let sat = |ys: &[u8]| Tensor::matrix(1, 3, ys.iter().map(|&y| if y == 1 { 20.0 } else { -20.0 }).collect()).unwrap();
            let o_b = tape.leaf(sat(&c.labels.alleged), true);
            let o_a = tape.leaf(sat(&c.labels.violated), true);
            let v = tape.leaf(Tensor::full(&[3, 2], 1.0), true);
            ForwardVars {
                o_b,
                o_a,
                views_b: v,
                views_a: v,
                article_views: v,
                token_weights: vec![],
                sentence_weights: vec![],
                interaction_weights: vec![],
            }
        })
        .collect();
    let cfg = TrainConfig {
        beta: 0.0,
        ..TrainConfig::default()
    };
    let (_, comps) = composite_loss(&mut tape, &outputs, &cases, &BankSnapshot::default(), &cfg).unwrap();
    assert!(comps.bce_a < 1e-8 && comps.bce_b < 1e-8);
}

#[test]
fn components_sum_to_total_and_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let splits = small_splits(20, 3, 4, 0.5, 1);
    let cases: Vec<&CaseDocument> = splits.train.iter().take(4).collect();
    let mut tape = Tape::new();
    let outputs = leaf_outputs(&mut tape, &mut rng, 4, 3, 5);
    let cfg = TrainConfig {
        beta: 0.7,
        ..TrainConfig::default()
    };
    let (total, comps) = composite_loss(&mut tape, &outputs, &cases, &BankSnapshot::default(), &cfg).unwrap();

    let flat = |f: &dyn Fn(&ForwardVars) -> Var| -> Vec<f64> {
        outputs.iter().flat_map(|o| tape.value(f(o)).values().to_vec()).collect()
    };
    let alleged: Vec<u8> = cases.iter().flat_map(|c| c.labels.alleged.clone()).collect();
    let violated: Vec<u8> = cases.iter().flat_map(|c| c.labels.violated.clone()).collect();
    let bce_b = oracle_bce(&flat(&|o| o.o_b), &alleged);
    let bce_a = oracle_bce(&flat(&|o| o.o_a), &violated);
    assert!((comps.bce_b - bce_b).abs() < 1e-12);
    assert!((comps.bce_a - bce_a).abs() < 1e-12);

    let mut t2 = Tape::new();
    let rows = |f: &dyn Fn(&ForwardVars) -> Var, t2: &mut Tape| -> Vec<Var> {
        outputs.iter().map(|o| t2.leaf(tape.value(f(o)).clone(), false)).collect()
    };
    let vb = rows(&|o| o.views_b, &mut t2);
    let va = rows(&|o| o.views_a, &mut t2);
    let ys_b: Vec<Vec<u8>> = cases.iter().map(|c| c.labels.alleged.clone()).collect();
    let ys_a: Vec<Vec<u8>> = cases.iter().map(|c| c.labels.violated.clone()).collect();
    let cb = contrastive::batch_loss(&mut t2, &vb, &ys_b, &[], &cfg.contrastive).unwrap();
    let ca = contrastive::batch_loss(&mut t2, &va, &ys_a, &[], &cfg.contrastive).unwrap();
    let (cb, ca) = (t2.value(cb).item(), t2.value(ca).item());
    let want = bce_a + bce_b + 0.7 * (ca + cb);
    assert!((tape.value(total).item() - want).abs() < 1e-9);
    assert!((comps.total - (comps.bce_a + comps.bce_b + 0.7 * (comps.contrastive_a + comps.contrastive_b))).abs() < 1e-9);
}

#[test]
fn single_term_mask_gives_that_term_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let splits = small_splits(20, 3, 4, 0.5, 2);
    let cases: Vec<&CaseDocument> = splits.train.iter().take(3).collect();
    let mut tape = Tape::new();
    let outputs = leaf_outputs(&mut tape, &mut rng, 3, 3, 4);
    let cfg = TrainConfig {
        loss_mask: LossMask {
            bce_b: true,
            ..LossMask::NONE
        },
        ..TrainConfig::default()
    };
    let (_, comps) = composite_loss(&mut tape, &outputs, &cases, &BankSnapshot::default(), &cfg).unwrap();
    assert_eq!(comps.total, comps.bce_b);
    assert_eq!((comps.bce_a, comps.contrastive_a, comps.contrastive_b), (0.0, 0.0, 0.0));

    let none = TrainConfig {
        loss_mask: LossMask::NONE,
        ..TrainConfig::default()
    };
    assert!(matches!(
        composite_loss(&mut tape, &outputs, &cases, &BankSnapshot::default(), &none),
        Err(Error::Contract(_))
    ));
}

#[test]
fn masked_term_equals_zero_weight() {
    let splits = small_splits(20, 3, 4, 0.5, 3);
    let net = small_net(3, 4);
    let params = ModelParams::init(&net, 4).unwrap();
    let batch: Vec<&CaseDocument> = splits.train.iter().take(4).collect();
    let masked = TrainConfig {
        loss_mask: LossMask {
            contrastive_a: false,
            contrastive_b: false,
            ..LossMask::ALL
        },
        ..TrainConfig::default()
    };
    let zero_weight = TrainConfig {
        beta: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (g1, _, _) = batch_gradients(&params, &batch, &BankSnapshot::default(), &masked, false, &mut rng).unwrap();
    let (g2, _, _) = batch_gradients(&params, &batch, &BankSnapshot::default(), &zero_weight, false, &mut rng).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        let a = a.clone().unwrap_or_default();
        let b = b.clone().unwrap_or_default();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 3,
        patience: 2,
        learning_rate: 5e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn equal_seeds_give_identical_histories() {
    let splits = small_splits(60, 3, 4, 0.5, 5);
    let net = NetworkConfig {
        dropout: 0.2,
        ..small_net(3, 4)
    };
    let a = train(&splits, &net, &quick_cfg(9)).unwrap();
    let b = train(&splits, &net, &quick_cfg(9)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let c = train(&splits, &net, &quick_cfg(10)).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn stalled_dev_metric_stops_after_patience() {
    let splits = small_splits(40, 3, 4, 0.5, 6);
    let cfg = TrainConfig {
        learning_rate: 1e-15,
        patience: 1,
        max_epochs: 10,
        ..quick_cfg(1)
    };
    let out = train(&splits, &small_net(3, 4), &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert_eq!(out.history.best_epoch, 0);
    assert_eq!(out.history.stop_reason, StopReason::Patience);
}

#[test]
fn best_epoch_holds_the_maximum_selection_score() {
    let splits = small_splits(60, 3, 4, 0.5, 7);
    let out = train(&splits, &small_net(3, 4), &quick_cfg(2)).unwrap();
    let best = out.history.best().selection;
    assert!(out.history.epochs.iter().all(|e| e.selection <= best));
    let dev = evaluate(&out.params, &splits.dev).unwrap();
    assert!((selection_score(&dev, &quick_cfg(2)) - best).abs() < 1e-12);
}

#[test]
fn mismatched_corpus_is_rejected() {
    let splits = small_splits(20, 3, 4, 0.5, 8);
    assert!(matches!(
        train(&splits, &small_net(4, 4), &quick_cfg(0)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let splits = small_splits(30, 3, 4, 0.5, 9);
    let out = train(&splits, &small_net(3, 4), &quick_cfg(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    out.history.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), out.history.epochs.len() + 1);
    assert!(text.starts_with("epoch,loss,"));
}

#[test]
fn planted_signal_is_learnable() {
    let splits = small_splits(500, 4, 16, 0.1, 10);
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 30,
        patience: 5,
        learning_rate: 1e-2,
        loss_mask: LossMask {
            bce_b: true,
            ..LossMask::NONE
        },
        ..TrainConfig::default()
    };
    let out = train(&splits, &small_net(4, 16), &cfg).unwrap();
    let best = out.history.best();
    assert!(best.dev_b_macro_f1 >= 0.9, "{:?}", out.history.epochs);
}

#[test]
fn ablation_names_are_unique_and_parse() {
    let mut names: Vec<&str> = AblationCondition::ALL.iter().map(|c| c.name()).collect();
    for c in AblationCondition::ALL {
        assert_eq!(c.name().parse::<AblationCondition>().unwrap(), c);
    }
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), 13);
    assert!(matches!("nope".parse::<AblationCondition>(), Err(Error::Config(_))));
}

#[test]
fn ablation_settings_follow_the_table() {
    use AblationCondition::*;
    let net = small_net(3, 4);
    let base = TrainConfig::default();
    let (n, t) = MultiTask.apply(&net, &base);
    assert!(!n.article_attention && n.dependency_mode == DependencyMode::None);
    assert!(!t.loss_mask.any_contrastive() && t.loss_mask.bce_a && t.loss_mask.bce_b);
    let (_, t) = WoOutcomeContrastive.apply(&net, &base);
    assert_eq!(t.contrastive.alpha, 0.0);
    let (_, t) = WoArticleContrastive.apply(&net, &base);
    assert!(!t.contrastive.article_term);
    assert_eq!(WoFeature.settings().dependency_mode, DependencyMode::LabelsOnly);
    assert_eq!(WoLabel.settings().dependency_mode, DependencyMode::FeaturesOnly);
    let (n, t) = TaskAContrastive.apply(&net, &base);
    assert!(n.article_attention && t.loss_mask.contrastive_a && !t.loss_mask.bce_b && !t.loss_mask.contrastive_b);
}

#[test]
fn outcome_ablation_equals_full_loss_with_zero_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let splits = small_splits(20, 3, 4, 0.5, 11);
    let cases: Vec<&CaseDocument> = splits.train.iter().take(4).collect();
    let mut tape = Tape::new();
    let outputs = leaf_outputs(&mut tape, &mut rng, 4, 3, 4);
    let (_, ablated) = AblationCondition::WoOutcomeContrastive.apply(&small_net(3, 4), &TrainConfig::default());
    let mut full = TrainConfig::default();
    full.contrastive.alpha = 0.0;
    let (_, a) = composite_loss(&mut tape, &outputs, &cases, &BankSnapshot::default(), &ablated).unwrap();
    let (_, b) = composite_loss(&mut tape, &outputs, &cases, &BankSnapshot::default(), &full).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_task_rows_leave_other_columns_blank() {
    let splits = small_splits(40, 3, 4, 0.5, 12);
    let out = run_ablation(&splits, AblationCondition::TaskBOnly, &small_net(3, 4), &quick_cfg(0)).unwrap();
    assert!(out.row.b_micro.is_some() && out.row.b_macro.is_some());
    assert!(out.row.a_micro.is_none() && out.row.a_macro.is_none() && out.row.a_hard_macro.is_none());
    let row = AblationCondition::TaskAOnly.table_row(&out.test);
    assert!(row.b_micro.is_none() && row.a_hard_macro.is_some());
}

#[test]
fn grid_selects_the_best_cell() {
    let splits = small_splits(40, 3, 4, 0.5, 13);
    let base = TrainConfig {
        max_epochs: 2,
        ..quick_cfg(0)
    };
    let spec = GridSpec {
        learning_rates: vec![5e-3, 1e-3],
        temperature_pairs: vec![(0.1, 0.2), (0.2, 0.3)],
    };
    let result = grid_search(&splits, &small_net(3, 4), &base, &spec).unwrap();
    assert_eq!(result.cells.len(), 4);
    let best = result.cells[result.best].dev_score;
    assert!(result.cells.iter().all(|c| c.dev_score <= best));
    assert_eq!(result.outcome.history.best().selection, best);
}

#[test]
fn single_cell_grid_equals_plain_training() {
    let splits = small_splits(40, 3, 4, 0.5, 14);
    let base = quick_cfg(4);
    let spec = GridSpec {
        learning_rates: vec![base.learning_rate],
        temperature_pairs: vec![(base.contrastive.tau_a, base.contrastive.tau_c)],
    };
    let g = grid_search(&splits, &small_net(3, 4), &base, &spec).unwrap();
    let plain = train(&splits, &small_net(3, 4), &base).unwrap();
    assert_eq!(g.outcome.history, plain.history);
    assert_eq!(GridSpec::from_config(&base).temperature_pairs.len(), 15);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let net = NetworkConfig {
        k: 3,
        d_e: 8,
        d_att_tok: 4,
        d_gru: 3,
        d_att_sent: 4,
        heads: 2,
        d_cls: 4,
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig {
        contrastive: ContrastiveConfig {
            tau_a: 0.5,
            tau_c: 0.7,
            ..ContrastiveConfig::default()
        },
        ..TrainConfig::default()
    };
    for seed in 0..3 {
        let report = probe_grad_check(&net, &cfg, 2, seed, 1e-2).unwrap();
        assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
    }
}
