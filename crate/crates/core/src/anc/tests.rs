use super::*;
use crate::rng::Rng;

const PROMPT: [u32; 4] = [5, 9, 2, 6];

fn frame(size: usize, fill: f32) -> EventFrame {
    let mut f = EventFrame::empty(size, size, (0, 1));
    f.counts.data_mut().fill(fill);
    f
}

fn image(size: usize) -> Tensor {
    Tensor::uniform(&[3, size, size], 0.0, 1.0, &mut Rng::new(12))
}

fn budget() -> BudgetSignal {
    BudgetSignal::new(1.0).unwrap()
}

#[test]
fn desk_branch_flops_are_ordered_near_one_four_sixteen() {
    let f = AncConfig::desk().branch_flops();
    let (r1, r2) = (f[1] as f64 / f[0] as f64, f[2] as f64 / f[0] as f64);
    assert!(f[0] < f[1] && f[1] < f[2]);
    assert!((3.5..=4.5).contains(&r1), "small/tiny {r1}");
    assert!((14.0..=18.0).contains(&r2), "medium/tiny {r2}");
}

#[test]
fn silent_frame_runs_only_tiny_at_a_fraction_of_medium_cost() {
    let model = AncModel::new(AncConfig::desk(), 3).unwrap();
    let img = image(224);
    let silent = frame(224, 0.0);
    let step = anc_step(&model, &img, &silent, &PROMPT, budget(), RouteMode::Infer, 4).unwrap();
    assert_eq!(step.metrics.routing.active, vec![0]);
    assert_eq!(step.metrics.level, 0);
    assert_eq!(step.metrics.executed.get("branch_small"), 0);
    assert_eq!(step.metrics.executed.get("branch_medium"), 0);
    let base = medium_only_step(&model, &img, &silent, &PROMPT, budget(), 4).unwrap();
    let ratio = step.flops as f64 / base.flops as f64;
    assert!(ratio <= 0.15, "F ratio {ratio}");
}

#[test]
fn saturated_frame_activates_medium() {
    let model = AncModel::new(AncConfig::fast(), 3).unwrap();
    let step = anc_step(&model, &image(64), &frame(64, 5.0), &PROMPT, budget(), RouteMode::Infer, 2).unwrap();
    assert!(step.metrics.routing.active.contains(&2));
    assert_eq!(step.metrics.level, 2);
}

#[test]
fn f_is_the_ledger_total_and_the_weighted_closed_form() {
    let model = AncModel::new(AncConfig::fast(), 4).unwrap();
    // a moderately busy frame so several branches share the weight
    let mut e = frame(64, 0.0);
    for (i, v) in e.counts.data_mut().iter_mut().enumerate() {
        if (i / 64) % 4 == 0 {
            *v = 3.0;
        }
    }
    for mode in [RouteMode::Infer, RouteMode::Train { seed: 1 }, RouteMode::Train { seed: 2 }] {
        let step = anc_step(&model, &image(64), &e, &PROMPT, budget(), mode, 3).unwrap();
        let m = &step.metrics;
        assert_eq!(step.flops, m.ledger.total());
        let analytic = model.config.branch_flops();
        let mut expected = 0u64;
        for &i in &m.routing.active {
            expected += (m.routing.w[i] as f64 * analytic[i] as f64).round() as u64;
            assert_eq!(m.executed.get(&format!("branch_{}", LEVEL_NAMES[i])), analytic[i]);
        }
        for stage in ["complexity_estimator", "router", "budget_gate", "decoder"] {
            expected += m.ledger.get(stage);
        }
        assert_eq!(step.flops, expected, "{mode:?}");
    }
}

#[test]
fn one_hot_and_thresholded_weights_select_branches() {
    let model = AncModel::new(AncConfig::fast(), 5).unwrap();
    let feats = patch_features(&image(64), &frame(64, 1.0), 8).unwrap();
    let flops = model.config.branch_flops();
    for (w, active) in [([1.0, 0.0, 0.0], vec![0]), ([0.5, 0.45, 0.05], vec![0, 1])] {
        let mut g = Graph::inference();
        let p = g.constant(feats.clone());
        let wv = g.constant(Tensor::row(&w));
        let d = RoutingDecision::from_weights(w, 0.5, 0);
        assert_eq!(d.active, active);
        let z = branch_forward(&mut g, &model.branches, p, wv, &d).unwrap();
        let ledger = g.take_ledger();
        assert_eq!(ledger.get("branch_medium"), 0);
        assert_eq!(ledger.get("branch_tiny"), flops[0]);
        assert_eq!(ledger.get("branch_small"), if active.len() == 2 { flops[1] } else { 0 });
        // z is the raw weighted sum of the executed branch outputs
        let mut want = vec![0.0f32; model.config.feature_dim];
        for &i in &active {
            let mut g2 = Graph::inference();
            let p2 = g2.constant(feats.clone());
            let zi = model.branches[i].forward(&mut g2, p2).unwrap();
            for (acc, v) in want.iter_mut().zip(g2.value(zi).data()) {
                *acc += w[i] * v;
            }
        }
        for (a, b) in g.value(z).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn infer_mode_is_deterministic() {
    let model = AncModel::new(AncConfig::fast(), 6).unwrap();
    let e = frame(64, 1.0);
    let a = anc_step(&model, &image(64), &e, &PROMPT, budget(), RouteMode::Infer, 3).unwrap();
    let b = anc_step(&model, &image(64), &e, &PROMPT, budget(), RouteMode::Infer, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_depth_follows_level() {
    let model = AncModel::new(AncConfig::fast(), 7).unwrap();
    let z = Tensor::randn(&[1, 16], 1.0, &mut Rng::new(1));
    let run = |level: usize| {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let out = conditional_decode(&mut g, &model.decoder, zv, &PROMPT, level, 3).unwrap();
        (out, g.ledger().get(DECODER_STAGE))
    };
    let (_, f0) = run(0);
    let (out2, f2) = run(2);
    assert!(f0 < f2);
    let mut g = Graph::inference();
    let zv = g.constant(z.clone());
    let full = g.with_stage(DECODER_STAGE, |g| {
        let text = model.decoder.embed(g, &PROMPT, 1).unwrap();
        let seq = g.concat_rows(zv, text).unwrap();
        model.decoder.greedy(g, seq, 3, model.decoder.depth()).unwrap()
    });
    assert_eq!(out2, full);
    let mut g = Graph::inference();
    let zv = g.constant(z);
    assert!(matches!(
        conditional_decode(&mut g, &model.decoder, zv, &PROMPT, 3, 1),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn budget_routing_and_straight_through_flags() {
    let mut cfg = AncConfig::fast();
    cfg.budget_routes = true;
    cfg.straight_through = true;
    let model = AncModel::new(cfg, 8).unwrap();
    let e = frame(64, 0.0);
    let step = anc_step(&model, &image(64), &e, &PROMPT, budget(), RouteMode::Infer, 1).unwrap();
    let w = step.metrics.routing.w;
    assert_eq!(step.metrics.routing.active.len(), 1);
    assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn mismatched_frame_is_config_error() {
    let model = AncModel::new(AncConfig::fast(), 9).unwrap();
    let err = anc_step(&model, &image(64), &frame(32, 0.0), &PROMPT, budget(), RouteMode::Infer, 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
