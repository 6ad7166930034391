use scalekv::classifier::{classify, collect_variances, HeadClassification};
use scalekv::compression::{PolicyConfig, PolicyKind};
use scalekv::harness::config::{BudgetConfig, ClassificationSource, MaskConfig, MaskTarget};
use scalekv::harness::experiments::no_attention_baseline;
use scalekv::harness::{
    execute, mask_heads, metrics_csv, run, sweep, RunConfig, Trace, METRICS_HEADER,
};
use scalekv::{build_schedule, Error};

fn planted(seed: u64) -> (RunConfig, HeadClassification) {
    let mut c = RunConfig::new(2, 4, 2, 4, 4, seed);
    c.model.planted_fraction = Some(0.25);
    let s = c.schedule().unwrap();
    let model = c.build_model(&s).unwrap();
    let cl = classify(&collect_variances(&model, &s, &[seed]).unwrap(), 0.25).unwrap();
    (c, cl)
}

fn with_head_aware(mut c: RunConfig, cl: HeadClassification, average: usize) -> RunConfig {
    c.policy = PolicyConfig::new(PolicyKind::HeadAware);
    c.budget = Some(BudgetConfig {
        average,
        contextual: None,
        ratio: 2.0,
        alpha: None,
    });
    c.classification = Some(ClassificationSource::Inline(cl));
    c
}

#[test]
fn uncompressed_single_head_counts_match_closed_form() {
    let m = execute(&RunConfig::new(2, 4, 1, 1, 4, 1)).unwrap().metrics;
    assert_eq!(m.flops, 5797);
    assert_eq!(m.per_step_flops, vec![1, 20, 336, 5440]);
    assert_eq!(m.peak_entries, 85);
    assert_eq!(m.divergence.unwrap().max_abs, 0.0);
}

#[test]
fn head_aware_without_classification_is_config_error() {
    let mut c = RunConfig::new(2, 4, 1, 2, 4, 1);
    c.policy = PolicyConfig::new(PolicyKind::HeadAware);
    c.budget = Some(BudgetConfig {
        average: 20,
        contextual: None,
        ratio: 2.0,
        alpha: None,
    });
    let err = execute(&c).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn structural_budget_below_final_scale_is_config_error() {
    let (c, cl) = planted(2);
    assert!(matches!(
        execute(&with_head_aware(c, cl, 20)),
        Err(Error::Config(_))
    ));
}

#[test]
fn budget_at_full_length_is_lossless_and_half_budget_diverges() {
    let (c, cl) = planted(3);
    let full = execute(&with_head_aware(c.clone(), cl.clone(), 85)).unwrap();
    assert_eq!(full.metrics.divergence.unwrap().max_abs, 0.0);
    assert!(full.trace.steps.iter().all(|s| s.events.is_empty()));

    let half = execute(&with_head_aware(c, cl, 70)).unwrap();
    let d = half.metrics.divergence.unwrap();
    assert!(d.max_abs.is_finite() && d.max_abs > 0.0);
    let plan = half.trace.budgets.unwrap();
    for step in &half.trace.steps {
        for e in &step.events {
            assert!(e.post_rows <= e.budget);
            assert_eq!(e.budget, plan.budget_of(e.head_type.unwrap()));
        }
    }
}

#[test]
fn peak_includes_pre_compression_spike() {
    let mut c = RunConfig::new(2, 4, 1, 1, 4, 9);
    c.policy = PolicyConfig::new(PolicyKind::Positional);
    c.budget = Some(BudgetConfig {
        average: 20,
        contextual: None,
        ratio: 1.0,
        alpha: None,
    });
    let m = execute(&c).unwrap().metrics;
    assert_eq!(m.peak_entries, 20 + 64);
    assert_eq!(m.final_entries, 20);
    assert_eq!(m.flops, 1621);
}

#[test]
fn trace_round_trip_and_csv_layout() {
    let (c, cl) = planted(4);
    let dir = tempfile::tempdir().unwrap();
    let mut c = with_head_aware(c, cl, 70);
    c.outputs.trace = Some(dir.path().join("trace.json"));
    c.outputs.metrics = Some(dir.path().join("metrics.csv"));
    let out = run(&c).unwrap();

    let loaded = Trace::load(c.outputs.trace.as_ref().unwrap()).unwrap();
    assert_eq!(loaded, out.trace);
    for (a, b) in loaded.steps.iter().zip(&out.trace.steps) {
        assert_eq!(a.retained_positions, b.retained_positions);
    }
    assert!(loaded.config.outputs.trace.is_none());
    assert_eq!(loaded.config_hash, c.hash());

    let csv = std::fs::read_to_string(c.outputs.metrics.as_ref().unwrap()).unwrap();
    let lines: Vec<&str> = csv.split('\n').collect();
    assert_eq!(lines[0], METRICS_HEADER.join(","));
    assert_eq!(
        lines[0],
        "config_hash,rho,policy,flops,overhead_flops,peak_entries,max_abs,mean_abs,cosine"
    );
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2], "");
    assert!(!csv.contains('\r'));
    assert!(lines[1].starts_with(&format!("{},", c.hash())));
}

#[test]
fn missing_divergence_leaves_csv_fields_empty() {
    let mut c = RunConfig::new(2, 2, 1, 1, 2, 1);
    c.compare_reference = false;
    let m = execute(&c).unwrap().metrics;
    let text = metrics_csv(&[m]).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with(",,,"));
}

#[test]
fn sweep_at_zero_ratio_is_lossless_for_every_variant() {
    let (c, _) = planted(5);
    let rows = sweep(&c, &[0.0, 0.8]).unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows.iter().filter(|r| r.ratio == 0.0) {
        assert_eq!(r.metrics.divergence.unwrap().max_abs, 0.0, "{}", r.variant);
    }
    let t_k = build_schedule(2, 4).unwrap().total_tokens();
    assert!(rows
        .iter()
        .filter(|r| r.ratio == 0.8)
        .all(|r| r.budget == t_k / 5));
    assert!(matches!(sweep(&c, &[1.0]), Err(Error::Config(_))));
}

fn masked(
    c: &RunConfig,
    cl: &HeadClassification,
    head_type: MaskTarget,
    fraction: f64,
) -> RunConfig {
    let mut c = c.clone();
    c.classification = Some(ClassificationSource::Inline(cl.clone()));
    c.masking = Some(MaskConfig {
        head_type,
        fraction,
    });
    c
}

#[test]
fn masking_effects() {
    let mut c = RunConfig::new(2, 4, 2, 10, 4, 6);
    c.model.planted_fraction = Some(0.5);
    let s = c.schedule().unwrap();
    let cl = classify(
        &collect_variances(&c.build_model(&s).unwrap(), &s, &[6]).unwrap(),
        0.5,
    )
    .unwrap();

    // 10 contextual heads: a fraction of 0.01 rounds to none.
    let none = mask_heads(&masked(&c, &cl, MaskTarget::Contextual, 0.01)).unwrap();
    assert!(none.masked.is_empty());
    assert_eq!(none.metrics.divergence.unwrap().max_abs, 0.0);

    for target in [MaskTarget::Contextual, MaskTarget::Structural] {
        let r = mask_heads(&masked(&c, &cl, target, 0.2)).unwrap();
        assert_eq!(r.masked.len(), 2);
        assert!(r.metrics.divergence.unwrap().max_abs > 0.0, "{target:?}");
    }

    let all = masked(&c, &cl, MaskTarget::All, 1.0);
    let out = execute(&all).unwrap();
    assert_eq!(out.final_hidden, no_attention_baseline(&all).unwrap());
    assert!(matches!(
        mask_heads(&masked(&c, &cl, MaskTarget::All, 0.0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn config_json_round_trip_keeps_hash() {
    let (c, cl) = planted(7);
    let c = with_head_aware(c, cl, 70);
    let text = serde_json::to_string(&c).unwrap();
    let back = RunConfig::from_json(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
}
