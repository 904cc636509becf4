mod common;

use common::{all_pairs_jaccard, char_ngrams, exact_jaccard, mutate, planted_corpus, rng, words};
use curate_core::dedup::{estimate_jaccard, find_duplicates, minhash_signature, shingle, DedupParams, PermutationFamily};
use curate_core::types::PageRef;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn oracle_matches_hand_counts() {
    // 14 shared of 28 distinct 5-grams
    assert_eq!(exact_jaccard("the quick brown fox jumps", "the quick brown cat jumps", 5), 0.5);
    // 20 of 33, counted in code points
    let j = exact_jaccard("वात दोष शरीर में गति का कारण है", "वात दोष शरीर में गति का मूल है", 5);
    assert!((j - 20.0 / 33.0).abs() < 1e-12);
    assert_eq!(char_ngrams("abcabcabc", 5).len(), 3);
    assert_eq!(char_ngrams("abc", 5).len(), 1);
}

#[test]
fn shingle_counts_match_oracle() {
    for t in ["abcabcabc", "abc", "the quick  brown\nfox", "वात दोष शरीर में गति"] {
        assert_eq!(shingle(t, 5).unwrap().len(), char_ngrams(t, 5).len(), "{t}");
    }
}

#[test]
fn frozen_estimates() {
    // regression values for the seeded permutation family
    let a = shingle("the quick brown fox jumps", 5).unwrap();
    let b = shingle("the quick brown cat jumps", 5).unwrap();
    let fam = PermutationFamily::new(256, 42);
    let est = estimate_jaccard(&fam.sign(&a).unwrap(), &fam.sign(&b).unwrap()).unwrap();
    assert_eq!(est, FROZEN_EST_256);
    assert!((est - 0.5).abs() <= 0.1);
}

const FROZEN_EST_256: f64 = 109.0 / 256.0;

#[test]
fn planted_pairs_found_without_false_merges() {
    let (docs, planted) = planted_corpus(7);
    let exact = all_pairs_jaccard(&docs, 5);
    for &(i, j) in &planted {
        assert!(exact[&(i, j)] >= 0.85, "planted pair {i},{j} only {}", exact[&(i, j)]);
    }
    let background = exact
        .iter()
        .filter(|(k, _)| !planted.contains(k))
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    assert!(background <= 0.3, "background pair at {background}");

    let pages: Vec<(PageRef, String)> = docs
        .iter()
        .enumerate()
        .map(|(i, t)| (PageRef::new("synthetic", i as u32 + 1), t.clone()))
        .collect();
    let clusters = find_duplicates(&pages, &DedupParams::default()).unwrap();
    let mut found = 0;
    for c in clusters.iter().filter(|c| !c.is_singleton()) {
        let idx: Vec<usize> = c.members.iter().map(|m| m.page_no as usize - 1).collect();
        assert_eq!(idx.len(), 2, "only planted pairs may merge: {idx:?}");
        assert!(planted.contains(&(idx[0], idx[1])), "false merge {idx:?}");
        found += 1;
    }
    assert!(found >= 48, "found {found}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimate_is_symmetric_and_reflexive(seed in any::<u64>(), rate in 0.0f64..1.0) {
        let mut r = rng(seed);
        let a = words(&mut r, 40);
        let b = mutate(&mut r, &a, rate);
        let (a, b) = (a.join(" "), b.join(" "));
        let sa = minhash_signature(&shingle(&a, 5).unwrap(), 128, seed).unwrap();
        let sb = minhash_signature(&shingle(&b, 5).unwrap(), 128, seed).unwrap();
        prop_assert_eq!(estimate_jaccard(&sa, &sa).unwrap(), 1.0);
        prop_assert_eq!(estimate_jaccard(&sa, &sb).unwrap(), estimate_jaccard(&sb, &sa).unwrap());
    }

    #[test]
    fn estimate_tracks_exact(seed in any::<u64>(), rate in 0.0f64..1.0) {
        let mut r = rng(seed);
        let a = words(&mut r, 60);
        let b = mutate(&mut r, &a, rate);
        let (a, b) = (a.join(" "), b.join(" "));
        let fam = PermutationFamily::new(1024, 42);
        let est = estimate_jaccard(
            &fam.sign(&shingle(&a, 5).unwrap()).unwrap(),
            &fam.sign(&shingle(&b, 5).unwrap()).unwrap(),
        ).unwrap();
        // six standard deviations at k = 1024
        prop_assert!((est - exact_jaccard(&a, &b, 5)).abs() <= 0.1);
    }

    #[test]
    fn clusters_partition_the_input(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng(seed);
        let mut docs: Vec<String> = Vec::new();
        for i in 0..n {
            if i > 0 && r.random_bool(0.3) {
                let prev: Vec<String> = docs[i - 1].split(' ').map(str::to_owned).collect();
                docs.push(mutate(&mut r, &prev, 0.02).join(" "));
            } else {
                docs.push(words(&mut r, 50).join(" "));
            }
        }
        let pages: Vec<(PageRef, String)> = docs
            .iter()
            .enumerate()
            .map(|(i, t)| (PageRef::new("p", i as u32 + 1), t.clone()))
            .collect();
        let clusters = find_duplicates(&pages, &DedupParams::default()).unwrap();
        let mut seen: Vec<PageRef> = clusters.iter().flat_map(|c| c.members.clone()).collect();
        seen.sort();
        let mut want: Vec<PageRef> = pages.iter().map(|(p, _)| p.clone()).collect();
        want.sort();
        prop_assert_eq!(seen, want);
        for c in &clusters {
            prop_assert_eq!(&c.representative, c.members.iter().min().unwrap());
        }
    }
}

