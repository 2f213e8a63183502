use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use clover_core::clinical_fewshot::{self, Label, Organ, PatchRecord};
use clover_core::loss_kernel::{
    itc_loss, itc_loss_from_similarities, itg_nll, itm_loss, normalize_rows2, normalize_rows3, EmbeddingBatch,
    MatchBatch, Pooling, TokenLogits,
};
use clover_core::vqa_metrics::{normalize, open_recall, prf};

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-e]{1,3}", 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn prf_is_bounded_and_symmetric(r in words(), p in words()) {
        let a = prf(&r, &p).unwrap();
        let b = prf(&p, &r).unwrap();
        for v in [a.recall, a.precision, a.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((a.recall - b.precision).abs() < 1e-12);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert_eq!(open_recall(&r, &p).unwrap(), a.recall);
    }

    #[test]
    fn normalization_is_idempotent(text in "\\PC{0,60}") {
        let once = normalize(&text);
        prop_assert_eq!(normalize(&once.join(" ")), once);
    }

    #[test]
    fn contrastive_loss_is_invariant_to_rotation_and_batch_order(
        seed_vals in prop::collection::vec(-1.0f64..1.0, 4 * 3 * 5 + 4 * 5 + 5),
        tau in 0.05f64..1.0,
        shift in 1usize..4,
    ) {
        let (b, nq, d) = (4, 3, 5);
        let q = normalize_rows3(Array3::from_shape_vec((b, nq, d), seed_vals[..b * nq * d].to_vec()).unwrap());
        let t = normalize_rows2(Array2::from_shape_vec((b, d), seed_vals[b * nq * d..b * nq * d + b * d].to_vec()).unwrap());
        prop_assume!(q.iter().all(|v| v.is_finite()) && t.iter().all(|v| v.is_finite()));
        let base = EmbeddingBatch::new(q.clone(), t.clone()).unwrap();
        let loss = itc_loss(&base, tau, Pooling::Max).unwrap();
        prop_assert!(loss >= 0.0);

        // Householder reflection I - 2vv^T is orthogonal
        let v = normalize_rows2(Array2::from_shape_vec((1, d), seed_vals[b * nq * d + b * d..].to_vec()).unwrap());
        prop_assume!(v.iter().all(|x| x.is_finite()));
        let v = v.row(0).to_owned();
        let mut h = Array2::<f64>::eye(d);
        for i in 0..d {
            for j in 0..d {
                h[[i, j]] -= 2.0 * v[i] * v[j];
            }
        }
        let mut q_rot = q.clone();
        for mut item in q_rot.outer_iter_mut() {
            let rotated = item.dot(&h);
            item.assign(&rotated);
        }
        let rotated = EmbeddingBatch::new(q_rot, t.dot(&h)).unwrap();
        prop_assert!((itc_loss(&rotated, tau, Pooling::Max).unwrap() - loss).abs() < 1e-9);

        let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let q_perm = q.select(ndarray::Axis(0), &perm);
        let t_perm = t.select(ndarray::Axis(0), &perm);
        let permuted = EmbeddingBatch::new(q_perm, t_perm).unwrap();
        prop_assert!((itc_loss(&permuted, tau, Pooling::Max).unwrap() - loss).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_falls_as_the_diagonal_grows(b in 2usize..8, gap in 0.1f64..2.0, tau in 0.05f64..1.0) {
        let weak = Array2::from_shape_fn((b, b), |(i, j)| if i == j { gap } else { 0.0 });
        let strong = Array2::from_shape_fn((b, b), |(i, j)| if i == j { 2.0 * gap } else { 0.0 });
        let lw = itc_loss_from_similarities(weak.view(), tau).unwrap();
        let ls = itc_loss_from_similarities(strong.view(), tau).unwrap();
        prop_assert!(ls < lw && lw < (b as f64).ln());
    }

    #[test]
    fn likelihood_losses_are_non_negative(
        probs in prop::collection::vec(0.001f64..0.999, 1..20),
        labels in prop::collection::vec(0u8..=1, 20),
    ) {
        let n = probs.len();
        let m = MatchBatch::new(probs.clone(), labels[..n].to_vec()).unwrap();
        prop_assert!(itm_loss(&m) >= 0.0);
        let steps: Vec<Vec<f64>> = probs.iter().map(|&p| vec![p, 1.0 - p]).collect();
        let l = TokenLogits::new(steps, vec![0; n]).unwrap();
        prop_assert!(itg_nll(&l) >= 0.0);
    }

    #[test]
    fn kshot_splits_hold_their_invariants(
        tumor_wsis in 2usize..6,
        normal_wsis in 2usize..6,
        held in 1usize..2,
        k in 1usize..2,
        seed: u64,
    ) {
        let mut patches = Vec::new();
        let mut class = HashMap::new();
        let mut tests = BTreeSet::new();
        for (label, count) in [(Label::Tumor, tumor_wsis), (Label::NonTumor, normal_wsis)] {
            for w in 0..count {
                let wsi = format!("{label}-{w}");
                if w < held {
                    tests.insert(wsi.clone());
                }
                class.insert(wsi.clone(), label);
                for p in 0..(w + 1) {
                    patches.push(PatchRecord {
                        patch_id: format!("{wsi}-{p}"),
                        wsi_id: wsi.clone(),
                        organ: Organ::Intestine,
                        label,
                        patch_ref: String::new(),
                        size_px: (512, 512),
                    });
                }
            }
        }
        let splits = clinical_fewshot::make_kshot(&patches, Organ::Intestine, k, &tests, seed, 5).unwrap();
        let all: BTreeSet<&str> = patches.iter().map(|p| p.patch_id.as_str()).collect();
        for s in &splits {
            let tumor = s.train_wsis.iter().filter(|w| class[*w] == Label::Tumor).count();
            prop_assert_eq!(tumor, k);
            prop_assert_eq!(s.train_wsis.len(), 2 * k);
            prop_assert!(s.train_wsis.iter().all(|w| !tests.contains(w)));
            let ids: Vec<&str> = s.train_patches.iter().chain(&s.test_patches).map(|p| p.patch_id.as_str()).collect();
            let unique: BTreeSet<&str> = ids.iter().copied().collect();
            prop_assert_eq!(unique.len(), ids.len());
            prop_assert!(unique.is_subset(&all));
            prop_assert_eq!(&s.test_patches, &splits[0].test_patches);
        }
    }
}
