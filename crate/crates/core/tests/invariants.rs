use std::collections::HashSet;

use landmark_core::descriptor_math::{arcmargin_logits, gem_pool, ArcMarginParams, FeatureMap, GemParams};
use landmark_core::knn::{fused_search, FeatureSet, FeatureSetBundle, SearchParams};
use landmark_core::metrics::{gap_at_1, GroundTruth};
use landmark_core::postprocess::{frequency_suppression, nonlandmark_penalty_from_results, PostprocessParams};
use landmark_core::recognition::{aggregate_class_scores, predict_from_results};
use landmark_core::store::DescriptorSet;
use landmark_core::{l2_normalize, top_k_search, FusionParams, LandmarkLabel, Prediction, SearchResult};
use proptest::prelude::*;

fn rows_strategy(max_rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f32..1.0, dim).prop_filter("non-zero row", |r| r.iter().any(|v| v.abs() > 1e-3)),
        1..=max_rows,
    )
}

fn unit(rows: &[Vec<f32>], prefix: &str, labels: Option<Vec<LandmarkLabel>>) -> DescriptorSet {
    let ids = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
    l2_normalize(&DescriptorSet::from_rows(ids, labels, rows).unwrap()).unwrap()
}

fn oracle_sim(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += f64::from(a[i]) * f64::from(b[i]);
    }
    s as f32
}

fn label(v: i64) -> LandmarkLabel {
    LandmarkLabel::new(v).unwrap()
}

fn predictions_strategy() -> impl Strategy<Value = Vec<Prediction>> {
    prop::collection::vec((-1i64..6, 0.0f64..3.0), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (l, c))| {
                if l < 0 {
                    Prediction::abstain(format!("q{i:03}"))
                } else {
                    Prediction {
                        query_id: format!("q{i:03}"),
                        landmark: label(l),
                        confidence: c,
                    }
                }
            })
            .collect()
    })
}

fn truth_for(preds: &[Prediction], truth_labels: &[i64]) -> GroundTruth {
    GroundTruth::new(
        preds
            .iter()
            .zip(truth_labels.iter().cycle())
            .map(|(p, &t)| (p.query_id.clone(), label(t)))
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_round_trip_is_bit_exact(rows in rows_strategy(20, 7), labelled in any::<bool>(), norm in any::<bool>()) {
        let labels = labelled.then(|| (0..rows.len()).map(|i| label(i as i64 % 4 - 1)).collect());
        let ids = (0..rows.len()).map(|i| format!("id-{i}")).collect();
        let mut set = DescriptorSet::from_rows(ids, labels, &rows).unwrap();
        if norm {
            set = l2_normalize(&set).unwrap();
        }
        let back = DescriptorSet::from_bytes(&set.to_bytes()).unwrap();
        prop_assert_eq!(back.ids(), set.ids());
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(back.is_normalized(), set.is_normalized());
        let a: Vec<u32> = back.matrix().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = set.matrix().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalization_is_idempotent(rows in rows_strategy(20, 9)) {
        let once = unit(&rows, "r", None);
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.matrix().iter().zip(twice.matrix()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn normalization_keeps_nearest_row(rows in rows_strategy(12, 5), q in prop::collection::vec(-1.0f32..1.0, 5), scales in prop::collection::vec(0.1f32..10.0, 12)) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
        let query = unit(&[q], "q", None);
        let base = unit(&rows, "r", None);
        let scaled: Vec<Vec<f32>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let rescaled = unit(&scaled, "r", None);
        let a = top_k_search(&query, &base, rows.len()).unwrap();
        let b = top_k_search(&query, &rescaled, rows.len()).unwrap();
        // scaling a row changes its normalized bits by at most rounding
        for (x, y) in a[0].similarities.iter().zip(&b[0].similarities) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        let best = a[0].similarities[0];
        let near_best: HashSet<usize> = a[0].iter().filter(|(_, s)| best - s < 1e-5).map(|(i, _)| i).collect();
        prop_assert!(near_best.contains(&b[0].neighbors[0]));
    }

    #[test]
    fn gem_is_monotone_in_p_and_bounded(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in prop::collection::vec(0.0f32..2.0, 64)) {
        let data: Vec<f32> = seed.iter().cycle().take(c * h * w).copied().collect();
        let map = FeatureMap::new(c, h, w, data).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for p in [1.0, 2.0, 3.0, 8.0, 32.0] {
            let out = gem_pool(&map, &GemParams::with_p(p)).unwrap();
            for (ch, &g) in out.iter().enumerate() {
                let vals = map.channel(ch);
                let lo = vals.iter().fold(f64::INFINITY, |m, &x| m.min(f64::from(x).max(1e-6)));
                let hi = vals.iter().fold(0.0f64, |m, &x| m.max(f64::from(x).max(1e-6)));
                prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12));
            }
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&out) {
                    prop_assert!(*b >= *a * (1.0 - 1e-12));
                }
            }
            prev = Some(out);
        }
    }

    #[test]
    fn margin_never_raises_argmax_target_logit(classes in 2usize..8, dim in 2usize..10, raw in prop::collection::vec(-1.0f32..1.0, 90), m in 0.0f64..1.5) {
        let norm = |v: &[f32]| { let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt(); v.iter().map(|x| (f64::from(*x) / n) as f32).collect::<Vec<_>>() };
        let rows: Vec<Vec<f32>> = raw.chunks(dim).take(classes + 1).map(norm).collect();
        prop_assume!(rows.len() == classes + 1 && rows.iter().all(|r| r.iter().all(|v| v.is_finite())));
        let emb = &rows[0];
        let weights: Vec<f32> = rows[1..].concat();
        let mut params = ArcMarginParams::new(classes, dim);
        params.margin = 0.0;
        let plain = arcmargin_logits(emb, &weights, 0, &params).unwrap();
        let target = (0..classes).fold(0, |b, j| if plain[j] > plain[b] { j } else { b });
        params.margin = m;
        let with = arcmargin_logits(emb, &weights, target, &params).unwrap();
        prop_assert!(with[target] <= plain[target]);
    }

    #[test]
    fn search_matches_oracle_and_permutations(idx in rows_strategy(40, 6), qs in rows_strategy(10, 6), k in 1usize..8, shift in 0usize..40) {
        let index = unit(&idx, "i", None);
        let queries = unit(&qs, "q", None);
        let k = k.min(index.len());
        let res = top_k_search(&queries, &index, k).unwrap();
        for (qi, r) in res.iter().enumerate() {
            let mut all: Vec<(f32, usize)> = (0..index.len()).map(|j| (oracle_sim(queries.row(qi), index.row(j)), j)).collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
            prop_assert_eq!(&r.neighbors, &want);
        }
        // rotate the index rows; neighbors relabel, similarities stay
        let n = index.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let rotated = index.select(&perm).unwrap();
        let res2 = top_k_search(&queries, &rotated, k).unwrap();
        for (a, b) in res.iter().zip(&res2) {
            prop_assert_eq!(&a.similarities, &b.similarities);
            let mapped: HashSet<usize> = b.neighbors.iter().map(|&j| perm[j]).collect();
            let tied: HashSet<usize> = a.neighbors.iter().copied().collect();
            if a.similarities.windows(2).all(|w| w[0] != w[1]) && (k == n || a.similarities[k - 1] != b.similarities[k - 1]) {
                prop_assert_eq!(mapped, tied);
            }
        }
        // reversing the query rows reverses the results
        let rev: Vec<usize> = (0..queries.len()).rev().collect();
        let res3 = top_k_search(&queries.select(&rev).unwrap(), &index, k).unwrap();
        let mut back = res3.clone();
        back.reverse();
        prop_assert_eq!(back, res);
    }

    #[test]
    fn uniform_fusion_ignores_set_order(a in rows_strategy(20, 4), b_raw in prop::collection::vec(-1.0f32..1.0, 80), q in rows_strategy(5, 4)) {
        let n = a.len();
        let b: Vec<Vec<f32>> = (0..n).map(|i| { let mut r = b_raw[i * 4..i * 4 + 4].to_vec(); r[0] += 2.0; r }).collect();
        let qb: Vec<Vec<f32>> = q.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let bundle = |first: bool, xa: DescriptorSet, xb: DescriptorSet| {
            let sa = FeatureSet { name: "a".into(), set: xa, weight: 1.0 };
            let sb = FeatureSet { name: "b".into(), set: xb, weight: 1.0 };
            FeatureSetBundle::new(if first { vec![sa, sb] } else { vec![sb, sa] }).unwrap()
        };
        let k = 3.min(n);
        let params = SearchParams::default();
        let r1 = fused_search(&bundle(true, unit(&q, "q", None), unit(&qb, "q", None)), &bundle(true, unit(&a, "i", None), unit(&b, "i", None)), k, &params).unwrap();
        let r2 = fused_search(&bundle(false, unit(&q, "q", None), unit(&qb, "q", None)), &bundle(false, unit(&a, "i", None), unit(&b, "i", None)), k, &params).unwrap();
        for (x, y) in r1.iter().zip(&r2) {
            prop_assert_eq!(&x.neighbors, &y.neighbors);
            for (s, t) in x.similarities.iter().zip(&y.similarities) {
                prop_assert!((s - t).abs() <= f32::EPSILON);
            }
        }
    }

    #[test]
    fn scaling_similarities_scales_confidences(sims in prop::collection::vec(0.01f32..1.0, 1..30), labels in prop::collection::vec(0i64..5, 30), c in 0.1f32..4.0) {
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let n = sorted.len();
        let index_labels: Vec<LandmarkLabel> = labels[..n].iter().map(|&l| label(l)).collect();
        let r = SearchResult { neighbors: (0..n).collect(), similarities: sorted.clone() };
        let scaled = SearchResult { neighbors: (0..n).collect(), similarities: sorted.iter().map(|s| s * c).collect() };
        let ids = vec!["q".to_string()];
        let params = FusionParams { k_agg: 3, alpha: 0.5 };
        let a = predict_from_results(&ids, &[r], Some(&index_labels), None, &params).unwrap();
        let b = predict_from_results(&ids, &[scaled], Some(&index_labels), None, &params).unwrap();
        prop_assert_eq!(a[0].landmark, b[0].landmark);
        prop_assert!((b[0].confidence - a[0].confidence * f64::from(c)).abs() <= 1e-5 * b[0].confidence.max(1.0));
    }

    #[test]
    fn raising_a_neighbor_never_lowers_its_class(sims in prop::collection::vec(0.0f32..1.0, 2..30), labels in prop::collection::vec(0i64..4, 30), pick in 0usize..30, bump in 0.0f32..0.5) {
        let n = sims.len();
        let pick = pick % n;
        let index_labels: Vec<LandmarkLabel> = labels[..n].iter().map(|&l| label(l)).collect();
        let order = |s: &[f32]| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            SearchResult { neighbors: o.clone(), similarities: o.iter().map(|&i| s[i]).collect() }
        };
        let mut raised = sims.clone();
        raised[pick] += bump;
        let before = aggregate_class_scores(&order(&sims), Some(&index_labels), 3).unwrap();
        let after = aggregate_class_scores(&order(&raised), Some(&index_labels), 3).unwrap();
        let class = index_labels[pick];
        prop_assert!(after[&class] >= before[&class] - 1e-12);
    }

    #[test]
    fn rule1_only_lowers_confidence(preds in predictions_strategy(), sims in prop::collection::vec(0.0f32..1.0, 180)) {
        let results: Vec<SearchResult> = preds.iter().enumerate().map(|(i, _)| {
            let mut s = sims[i * 3..i * 3 + 3].to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            SearchResult { neighbors: vec![0, 1, 2], similarities: s }
        }).collect();
        let out = nonlandmark_penalty_from_results(&preds, &results, &PostprocessParams::default()).unwrap();
        for (a, b) in preds.iter().zip(&out) {
            prop_assert_eq!(a.landmark, b.landmark);
            prop_assert!(b.confidence <= a.confidence);
        }
        // a non-landmark set orthogonal to every query is a no-op
        let zero: Vec<SearchResult> = preds.iter().map(|_| SearchResult { neighbors: vec![0, 1, 2], similarities: vec![0.0; 3] }).collect();
        prop_assert_eq!(nonlandmark_penalty_from_results(&preds, &zero, &PostprocessParams::default()).unwrap(), preds);
    }

    #[test]
    fn rule2_partitions_and_is_idempotent(preds in predictions_strategy(), cap in 1usize..8) {
        let out = frequency_suppression(&preds, cap);
        prop_assert_eq!(frequency_suppression(&out, cap), out.clone());
        let over = landmark_core::postprocess::overpredicted_landmarks(&preds, cap);
        let (sup, keep): (Vec<_>, Vec<_>) = preds.iter().zip(&out).partition(|(p, _)| over.contains(&p.landmark) && !p.is_abstention());
        if let (Some(max_sup), Some(min_keep)) = (
            sup.iter().map(|(_, o)| o.confidence).reduce(f64::max),
            keep.iter().map(|(_, o)| o.confidence).reduce(f64::min),
        ) {
            prop_assert!(min_keep > max_sup);
        }
        for block in [&sup, &keep] {
            for x in block.iter() {
                for y in block.iter() {
                    if x.0.confidence < y.0.confidence {
                        prop_assert!(x.1.confidence < y.1.confidence);
                    }
                }
            }
        }
    }

    #[test]
    fn gap_depends_only_on_order(preds in predictions_strategy(), truth in prop::collection::vec(-1i64..6, 1..10)) {
        let t = truth_for(&preds, &truth);
        prop_assume!(t.landmark_queries() > 0);
        let g = gap_at_1(&preds, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
        let cubed: Vec<Prediction> = preds.iter().map(|p| Prediction { confidence: p.confidence.powi(3) + 1.0, ..p.clone() }).collect();
        // x³ + 1 can merge distinct values only below double precision
        let distinct: HashSet<u64> = preds.iter().map(|p| p.confidence.to_bits()).collect();
        let distinct_cubed: HashSet<u64> = cubed.iter().map(|p| p.confidence.to_bits()).collect();
        prop_assume!(distinct.len() == distinct_cubed.len());
        prop_assert_eq!(gap_at_1(&cubed, &t).unwrap(), g);
    }

    #[test]
    fn gap_drops_when_a_correct_row_swaps_below_a_wrong_one(preds in predictions_strategy(), truth in prop::collection::vec(-1i64..6, 1..10), i in 0usize..60, j in 0usize..60) {
        let t = truth_for(&preds, &truth);
        prop_assume!(t.landmark_queries() > 0);
        let correct = |p: &Prediction| !p.is_abstention() && t.get(&p.query_id) == Some(p.landmark);
        let right: Vec<usize> = (0..preds.len()).filter(|&k| correct(&preds[k])).collect();
        let wrong: Vec<usize> = (0..preds.len()).filter(|&k| !correct(&preds[k]) && !preds[k].is_abstention()).collect();
        prop_assume!(!right.is_empty() && !wrong.is_empty());
        let (i, j) = (right[i % right.len()], wrong[j % wrong.len()]);
        prop_assume!(preds[i].confidence != preds[j].confidence);
        // put the correct row above the wrong one, then swap them
        let mut preds = preds.clone();
        if preds[i].confidence < preds[j].confidence {
            let c = preds[i].confidence;
            preds[i].confidence = preds[j].confidence;
            preds[j].confidence = c;
        }
        let mut swapped = preds.clone();
        swapped[i].confidence = preds[j].confidence;
        swapped[j].confidence = preds[i].confidence;
        prop_assert!(gap_at_1(&swapped, &t).unwrap() <= gap_at_1(&preds, &t).unwrap() + 1e-15);
    }

    #[test]
    fn burying_wrong_rows_never_hurts(preds in predictions_strategy(), truth in prop::collection::vec(-1i64..6, 1..10), mask in prop::collection::vec(any::<bool>(), 60)) {
        let t = truth_for(&preds, &truth);
        prop_assume!(t.landmark_queries() > 0);
        let shift = 1.0 + preds.iter().map(|p| p.confidence).fold(0.0, f64::max);
        let buried: Vec<Prediction> = preds.iter().zip(&mask).map(|(p, &m)| {
            let wrong = !p.is_abstention() && t.get(&p.query_id) != Some(p.landmark);
            let mut p = p.clone();
            if m && wrong {
                p.confidence -= shift;
            }
            p
        }).collect();
        prop_assert!(gap_at_1(&buried, &t).unwrap() >= gap_at_1(&preds, &t).unwrap() - 1e-15);
    }
}
