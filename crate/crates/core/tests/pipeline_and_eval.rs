use std::collections::HashSet;

use enclip_core::evalkit::{precision_at_k, run_eval, synth_fixture, ApDenominator, EvalConfig, SynthSpec};
use enclip_core::pipeline::PipelineConfig;
use enclip_core::{cosine_topk, multi_model_retrieve, run_query, ModelSet};

fn ordered<'a>(set: &ModelSet, q: &'a enclip_core::evalkit::QueryRecord) -> Vec<&'a [f32]> {
    let vectors = q.vectors.as_ref().unwrap();
    set.models().iter().map(|m| vectors[m.model_id()].as_slice()).collect()
}

#[test]
fn single_model_single_cluster_reduces_to_plain_retrieval() {
    let spec = SynthSpec {
        items: 300,
        groups: 5,
        models: 1,
        dim: 12,
        queries_per_group: 2,
        ..SynthSpec::default()
    };
    let fx = synth_fixture(21, &spec).unwrap();
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    let config = EvalConfig {
        pipeline: PipelineConfig {
            k_min: 1,
            k_max: 1,
            ..PipelineConfig::default()
        },
        ..EvalConfig::default()
    };
    for q in &fx.queries {
        let v = ordered(&set, q);
        let result = run_query(&set, &v, &config.pipeline).unwrap();
        let plain: Vec<String> = cosine_topk(set.model(0), v[0], 10).unwrap().into_iter().map(|h| h.item_id).collect();
        assert_eq!(result.item_ids(), plain);
    }
    let report = run_eval(&set, &fx.queries, &fx.qrels, &config).unwrap();
    assert_eq!(report.map_score, report.baselines[0].map_score);
    assert_eq!(report.per_query, report.baselines[0].per_query);
}

#[test]
fn identical_models_pick_the_single_model_items() {
    let spec = SynthSpec {
        items: 300,
        groups: 5,
        models: 3,
        dim: 12,
        queries_per_group: 1,
        model_noise: 0.0,
        blind_fraction: 0.0,
        ..SynthSpec::default()
    };
    let fx = synth_fixture(22, &spec).unwrap();
    assert_eq!(fx.stores[0].as_slice(), fx.stores[2].as_slice());
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    let config = PipelineConfig {
        n: 20,
        ..PipelineConfig::default()
    };
    for q in &fx.queries {
        let v = ordered(&set, q);
        let result = run_query(&set, &v, &config).unwrap();
        let got: HashSet<&str> = result.item_ids().into_iter().collect();
        let hits = cosine_topk(set.model(0), v[0], 20).unwrap();
        let want: HashSet<&str> = hits.iter().map(|h| h.item_id.as_str()).collect();
        assert_eq!(got, want);
        assert_eq!(result.items[0].item_id, hits[0].item_id);
        assert!(result.items.iter().all(|i| i.frequency == 3));
    }
}

#[test]
fn union_of_models_recalls_more_than_any_one() {
    let fx = synth_fixture(0, &SynthSpec::default()).unwrap();
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    let mut single = vec![0usize; set.z()];
    let mut union = 0usize;
    for (q, rel) in fx.queries.iter().zip(&fx.qrels) {
        let lists = multi_model_retrieve(&set, &ordered(&set, q), 20).unwrap();
        let mut seen = HashSet::new();
        for (n, list) in lists.iter().enumerate() {
            for h in list {
                if rel.relevant.contains(&h.item_id) {
                    single[n] += 1;
                    seen.insert(h.item_id.clone());
                }
            }
        }
        union += seen.len();
    }
    let best = *single.iter().max().unwrap();
    assert!(union > best, "union {union} vs best single {best} ({single:?})");
}

#[test]
fn unanimous_top_item_is_ranked_first() {
    let spec = SynthSpec {
        items: 400,
        groups: 8,
        models: 5,
        dim: 16,
        queries_per_group: 1,
        ..SynthSpec::default()
    };
    let fx = synth_fixture(23, &spec).unwrap();
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    let mut checked = 0;
    for q in &fx.queries {
        let v = ordered(&set, q);
        let lists = multi_model_retrieve(&set, &v, 20).unwrap();
        let top = &lists[0][0].item_id;
        if lists.iter().all(|l| &l[0].item_id == top) {
            let result = run_query(&set, &v, &PipelineConfig::default()).unwrap();
            assert_eq!(&result.items[0].item_id, top);
            checked += 1;
        }
    }
    // Querying with an item's own vectors forces unanimity.
    for item in ["item00007", "item00123", "item00399"] {
        let v: Vec<&[f32]> = set.models().iter().map(|m| m.vector_of(item).unwrap()).collect();
        let result = run_query(&set, &v, &PipelineConfig::default()).unwrap();
        assert_eq!(result.items[0].item_id, item);
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn ranking_invariants_hold_on_the_fixture() {
    let fx = synth_fixture(
        24,
        &SynthSpec {
            items: 500,
            groups: 10,
            models: 4,
            dim: 16,
            queries_per_group: 1,
            ..SynthSpec::default()
        },
    )
    .unwrap();
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    for n in [1, 5, 10, 40, 200] {
        for q in &fx.queries {
            let v = ordered(&set, q);
            let config = PipelineConfig {
                n,
                ..PipelineConfig::default()
            };
            let result = run_query(&set, &v, &config).unwrap();
            let diag = result.diagnostics.as_ref().unwrap();
            let pool: HashSet<&str> = diag.points.iter().map(|p| p.item_id.as_str()).collect();
            let ids = result.item_ids();
            assert_eq!(ids.len(), n.min(pool.len()));
            assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
            assert!(ids.iter().all(|id| pool.contains(id)));
            assert_eq!(result.short, n > pool.len());
            assert_eq!(ids[0], result.head_sequence[0]);
            let freq_total: usize = result.items.iter().map(|i| i.frequency).sum();
            assert!(freq_total <= diag.points.len());
        }
    }
}

#[test]
fn eval_report_is_consistent() {
    let fx = synth_fixture(
        25,
        &SynthSpec {
            items: 400,
            groups: 4,
            models: 3,
            dim: 16,
            queries_per_group: 3,
            ..SynthSpec::default()
        },
    )
    .unwrap();
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    for denominator in [ApDenominator::Min, ApDenominator::Total] {
        let config = EvalConfig {
            denominator,
            ..EvalConfig::default()
        };
        let report = run_eval(&set, &fx.queries, &fx.qrels, &config).unwrap();
        assert_eq!(report.baselines.len(), 3);
        assert_eq!(report.categories.len(), 4);
        for system in report.baselines.iter().map(|b| &b.per_query).chain([&report.per_query]) {
            for score in system.values() {
                let hits = score.prec_at_k * config.k as f64;
                assert!((hits - hits.round()).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&score.prec_at_k));
                assert!((0.0..=1.0).contains(&score.avg_prec_at_k));
            }
        }
        let mean = report.per_query.values().map(|s| s.avg_prec_at_k).sum::<f64>() / report.per_query.len() as f64;
        assert!((mean - report.map_score).abs() < 1e-12);

        let mut reversed = fx.queries.clone();
        reversed.reverse();
        let again = run_eval(&set, &reversed, &fx.qrels, &config).unwrap();
        assert!((again.map_score - report.map_score).abs() < 1e-12);
        assert!(report.table().contains("ENCLIP"));
    }
    let ranked = ["a", "b"];
    let relevant: HashSet<String> = ["a".to_string()].into();
    assert_eq!(precision_at_k(&ranked, &relevant, 4).unwrap(), 0.25);
}

#[test]
fn eval_rejects_bad_input() {
    let fx = synth_fixture(
        26,
        &SynthSpec {
            items: 60,
            groups: 3,
            models: 2,
            dim: 8,
            queries_per_group: 1,
            ..SynthSpec::default()
        },
    )
    .unwrap();
    let set = ModelSet::new(fx.stores.clone()).unwrap();
    let config = EvalConfig::default();
    assert!(run_eval(&set, &[], &fx.qrels, &config).is_err());
    assert!(run_eval(&set, &fx.queries, &fx.qrels[1..], &config).is_err());
    let mut dup = fx.queries.clone();
    dup.push(fx.queries[0].clone());
    assert!(run_eval(&set, &dup, &fx.qrels, &config).is_err());
    let small_n = EvalConfig {
        pipeline: PipelineConfig {
            n: 5,
            ..PipelineConfig::default()
        },
        ..EvalConfig::default()
    };
    assert!(run_eval(&set, &fx.queries, &fx.qrels, &small_n).is_err());
}

#[test]
fn synthetic_epochs_continue_past_five_models() {
    let fx = synth_fixture(
        27,
        &SynthSpec {
            items: 40,
            groups: 2,
            models: 7,
            dim: 4,
            queries_per_group: 1,
            ..SynthSpec::default()
        },
    )
    .unwrap();
    let epochs: Vec<u32> = fx.stores.iter().map(|m| m.epoch()).collect();
    assert_eq!(epochs, vec![10, 30, 50, 80, 100, 120, 140]);
    for (n, blind) in fx.blind.iter().enumerate() {
        for other in &fx.blind[n + 1..] {
            assert!(blind.is_disjoint(other));
        }
    }
}
