use std::collections::BTreeMap;

use stylekit::corpus::{default_styles, render_corpus, MotifBox, SynthConfig};
use stylekit::image::ImageBuffer;
use stylekit::mining::{mine_discriminative_patches, patch_box_iou, MiningConfig, MiningPage};

fn corpus(pages_per_book: usize) -> (Vec<Page>, BTreeMap<String, Vec<MotifBox>>) {
    corpus_with(4, 2, pages_per_book, 21)
}

struct Page {
    id: String,
    book: String,
    class: u32,
    image: ImageBuffer,
}

fn corpus_with(
    styles: usize,
    books: usize,
    pages_per_book: usize,
    seed: u64,
) -> (Vec<Page>, BTreeMap<String, Vec<MotifBox>>) {
    let cfg = SynthConfig {
        num_styles: styles,
        books_per_style: books,
        pages_per_book,
        resolution: [128, 128],
        seed,
    };
    let (manifest, images, motifs) = render_corpus(&cfg, &default_styles(styles, seed)).unwrap();
    let pages = manifest
        .pages
        .iter()
        .zip(images)
        .map(|(p, image)| Page {
            id: p.page_id.clone(),
            book: format!("{}/{}", p.illustrator_id, p.book_id),
            class: p.illustrator_id,
            image,
        })
        .collect();
    (
        pages,
        motifs.into_iter().map(|m| (m.page_id, m.motifs)).collect(),
    )
}

fn select(pages: &[Page], keep: impl Fn(u32) -> bool) -> Vec<MiningPage<'_>> {
    pages
        .iter()
        .filter(|p| keep(p.class))
        .map(|p| MiningPage {
            page_id: &p.id,
            group: &p.book,
            image: &p.image,
        })
        .collect()
}

fn mining_config() -> MiningConfig {
    MiningConfig {
        patch_size: 32,
        stride: 8,
        clusters: 12,
        negative_cap: 20_000,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn top_cluster_lands_on_the_exclusive_motif() {
    let (pages, motifs) = corpus_with(6, 4, 25, 7);
    let pos = select(&pages, |c| c == 1);
    let neg = select(&pages, |c| c != 1);
    let reports = mine_discriminative_patches(&pos, &neg, &mining_config()).unwrap();
    assert!(!reports.is_empty());
    assert!(reports.windows(2).all(|w| w[0].purity >= w[1].purity));
    for r in &reports {
        assert!((0.0..=1.0).contains(&r.purity));
        assert!(r.members.len() >= 3);
    }
    let top = &reports[0];
    let hits = top
        .members
        .iter()
        .filter(|m| motifs[&m.page_id].iter().any(|b| patch_box_iou(m, b) > 0.3))
        .count();
    eprintln!(
        "top cluster: {hits}/{} members on a motif",
        top.members.len()
    );
    assert!(hits as f64 >= 0.7 * top.members.len() as f64);
}

#[test]
fn identical_sets_give_chance_purity() {
    let (pages, _) = corpus(6);
    let all = select(&pages, |c| c <= 2);
    let reports = mine_discriminative_patches(&all, &all, &mining_config()).unwrap();
    let firings: usize = reports.iter().map(|r| r.firings.len()).sum();
    let positive: usize = reports.iter().map(|r| r.positive_firings).sum();
    assert!(firings > 0);
    // every cluster within 3 sigma of one half, and the pooled share too
    for r in &reports {
        let n = r.firings.len() as f64;
        assert!(
            (r.purity - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(),
            "cluster {} purity {}",
            r.id,
            r.purity
        );
    }
    let share = positive as f64 / firings as f64;
    eprintln!("pooled positive share {share:.3} over {firings} firings");
    assert!((share - 0.5).abs() <= 3.0 * (0.25 / firings as f64).sqrt());
}

#[test]
fn mining_is_deterministic_and_rejects_empty_sets() {
    let (pages, _) = corpus(4);
    let pos = select(&pages, |c| c == 2);
    let neg = select(&pages, |c| c != 2);
    let cfg = MiningConfig {
        clusters: 6,
        ..mining_config()
    };
    assert_eq!(
        mine_discriminative_patches(&pos, &neg, &cfg).unwrap(),
        mine_discriminative_patches(&pos, &neg, &cfg).unwrap()
    );
    assert!(mine_discriminative_patches(&pos, &[], &cfg).is_err());
}
