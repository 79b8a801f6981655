mod oracles;

use oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waymark_core::evaluation::argmax;
use waymark_core::retrieval::*;

fn vecn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

#[test]
fn top_k_selection_equals_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for trial in 0..100 {
        let n = rng.random_range(1..250);
        let dim = 16;
        // coarse values make exact quality ties likely, exercising the tie rule
        let pop: Vec<(String, usize, Vec<f32>)> = (0..n)
            .map(|i| {
                let e = if trial % 2 == 0 { (0..dim).map(|_| rng.random_range(0..3) as f32).collect() } else { vecn(&mut rng, dim) };
                (format!("f{:03}", rng.random_range(0..n)), i % 3, e)
            })
            .collect();
        let regions: Vec<RegionEmbedding> = pop
            .iter()
            .map(|(f, i, e)| RegionEmbedding { frame_id: f.clone(), annotation_index: *i, game: "core".into(), label: Label::Stp, embedding: e.clone() })
            .collect();
        let recipe = BankRecipe { core_titles: vec!["core".into()], support_titles: vec![], top_k: 100 };
        let bank = build_bank(&regions, &recipe, "emb").unwrap();
        let got: Vec<(String, usize)> = bank.entries.iter().map(|e| (e.meta.frame_id.clone(), e.meta.annotation_index)).collect();
        assert_eq!(got, top_k_oracle(&pop, 100));
        for e in &bank.entries {
            assert!((e.meta.quality - quality_oracle(&e.embedding)).abs() < 1e-9);
        }
    }
}

#[test]
fn support_titles_keep_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut regions = Vec::new();
    for (game, n) in [("a", 150), ("b", 30), ("support", 170), ("ignored", 5)] {
        for i in 0..n {
            regions.push(RegionEmbedding { frame_id: format!("{game}{i}"), annotation_index: 0, game: game.into(), label: Label::Mstp, embedding: vecn(&mut rng, 8) });
        }
    }
    let recipe = BankRecipe { core_titles: vec!["a".into(), "b".into()], support_titles: vec!["support".into()], top_k: 100 };
    let h = build_bank(&regions, &recipe, "e").unwrap().header();
    assert_eq!(h.count, 100 + 30 + 170);
    assert_eq!(h.counts_per_title.get("ignored"), None);
}

#[test]
fn query_equals_exhaustive_scan_on_large_banks() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dim = 512;
    let raw: Vec<Vec<f32>> = (0..10_000).map(|_| vecn(&mut rng, dim)).collect();
    let regions: Vec<RegionEmbedding> = raw
        .iter()
        .enumerate()
        .map(|(i, e)| RegionEmbedding { frame_id: format!("{i:05}"), annotation_index: 0, game: "s".into(), label: Label::Stp, embedding: e.clone() })
        .collect();
    let recipe = BankRecipe { core_titles: vec![], support_titles: vec!["s".into()], top_k: 100 };
    let bank = build_bank(&regions, &recipe, "e").unwrap();
    let before = bank.checksum();
    for t in 0..20 {
        let q = if t == 0 { raw[1234].clone() } else { vecn(&mut rng, dim) };
        let got = bank.query(&q).unwrap();
        assert_eq!(got, max_cosine_oracle(&raw, &q));
        if t == 0 {
            assert!((got - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(bank.checksum(), before);
}

#[test]
fn fusion_endpoints_reduce_to_each_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1000 {
        let k = rng.random_range(1..8);
        let s_sel: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s_ret: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        for norm in [ScoreNorm::Raw, ScoreNorm::Softmax] {
            let one = fuse(&s_sel, &s_ret, FusionConfig { alpha: 1.0, norm }).unwrap();
            assert_eq!(one.index, argmax(&s_sel).unwrap());
            let zero = fuse(&s_sel, &s_ret, FusionConfig { alpha: 0.0, norm }).unwrap();
            assert_eq!(zero.index, argmax(&s_ret).unwrap());
        }
        assert_eq!(argmax(&softmax(&s_sel)), argmax(&s_sel));
    }
}
