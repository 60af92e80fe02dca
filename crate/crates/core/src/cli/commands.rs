use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::*;
use crate::artifact;
use crate::bowsvm::{BowClassifier, BowConfig, KMeansConfig, SvmConfig};
use crate::convnet::{
    load_partition, maximize_unit, top_activating_crops, train_from_split, ActivationCrop,
    MaximizeConfig, NetworkSpec, TrainConfig,
};
use crate::corpus::{
    ingest_corpus_with, make_book_split, make_instance_split, synth, CorpusManifest, LabeledPage,
    Partition, SplitAssignment, SplitKind,
};
use crate::evaluation::{
    evaluate_books, evaluate_instances, style_capture_rate, AnyClassifier, CaptureReport,
    EvalReport, Protocol,
};
use crate::image::{self, ImageBuffer};
use crate::mining::{
    cluster_montage, mine_discriminative_patches, page_features, representative_quality,
    representatives_to_images, select_representatives, MiningConfig, MiningPage, RankingReport,
    RepresentativeFeature, SelectConfig,
};
use crate::numerics::TrainingSchedule;
use crate::transfer::{
    transfer_with_model, write_loss_csv, StyleTap, TransferConfig, TransferInit, TransferResult,
};

pub(super) fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::SynthGen(a) => synth_gen(a),
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::TrainBow(a) => train_bow(a),
        Command::TrainCnn(a) => train_cnn(a),
        Command::Eval(a) => eval(a),
        Command::EvalBooks(a) => eval_books(a),
        Command::Transfer(a) => transfer(a),
        Command::CaptureRate(a) => capture_rate(a),
        Command::MinePatches(a) => mine_patches(a),
        Command::Representatives(a) => representatives(a),
        Command::Introspect(a) => introspect(a),
        Command::Report(a) => report::run(a),
    }
}

/// Effective configuration of one command, written beside its outputs.
#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    config_hash: String,
    config: &'a T,
}

pub(super) fn hash_of<T: Serialize>(command: &str, args: &T) -> String {
    artifact::config_hash(&(command, args))
}

/// Create the output directory and record the run; returns the config hash.
fn start<T: Serialize>(command: &str, args: &T, out: &Path) -> Result<(PathBuf, String)> {
    let dir = output_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_hash = hash_of(command, args);
    artifact::write_json(
        &dir.join(format!("{command}.run.json")),
        &RunRecord {
            command,
            config_hash: config_hash.clone(),
            config: args,
        },
    )?;
    Ok((dir, config_hash))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn load_split(path: &Path) -> Result<(SplitAssignment, CorpusManifest)> {
    let split = SplitAssignment::load(path)?;
    let manifest_path = split.manifest.clone().ok_or_else(|| {
        Error::data(format!(
            "{}: split does not name its manifest",
            path.display()
        ))
    })?;
    let manifest = CorpusManifest::load(&manifest_path)?;
    split.validate(&manifest)?;
    Ok((split, manifest))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let (dir, _) = start("synth-gen", a, &a.out)?;
    let cfg = synth::SynthConfig {
        num_styles: a.styles,
        books_per_style: a.books,
        pages_per_book: a.pages,
        resolution: [a.resolution, a.resolution],
        seed: a.seed,
    };
    let specs = synth::default_styles(a.styles, a.seed);
    let corpus = synth::generate_synthetic_corpus(&cfg, &specs, &dir)?;
    println!(
        "{} pages in {} books -> {}",
        corpus.manifest.pages.len(),
        corpus.manifest.num_books(),
        dir.display()
    );
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let root = absolute(&a.root)?;
    let dir = output_dir(&a.out);
    if std::fs::canonicalize(&dir).is_ok_and(|d| d == root) {
        return Err(Error::invalid(
            "--out must differ from the corpus root; ingestion never writes into the corpus",
        ));
    }
    let (dir, _) = start("ingest", a, &a.out)?;
    let (mut manifest, report) = ingest_corpus_with(&root, [a.resolution, a.resolution])?;
    for page in &mut manifest.pages {
        page.path = root.join(&page.path);
    }
    manifest.save(&dir.join(synth::MANIFEST_FILE))?;
    artifact::write_json(&dir.join("ingest.json"), &report)?;
    println!(
        "{} pages accepted, {} skipped",
        report.accepted.len(),
        report.skipped.len()
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let manifest = CorpusManifest::load(&a.manifest)?;
    let (dir, hash) = start("split", a, &a.out)?;
    let mut split = match a.protocol {
        SplitProtocol::Instance => make_instance_split(&manifest, a.fractions, a.seed)?,
        SplitProtocol::Book => make_book_split(&manifest, a.test_books, a.val_fraction, a.seed)?,
    };
    split.manifest = Some(absolute(&a.manifest)?);
    split.config_hash = Some(hash);
    split.save(&dir.join("split.json"))?;
    println!(
        "train {} / val {} / test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    split_hash: Option<&'a str>,
    kind: &'a str,
    classes: Vec<u32>,
    train_pages: usize,
    train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<&'a crate::convnet::TrainRunLog>,
}

fn train_bow(a: &TrainBowArgs) -> Result<()> {
    let descriptor = a.descriptor.parse()?;
    let (split, manifest) = load_split(&a.split)?;
    let (dir, hash) = start("train-bow", a, &a.out)?;
    let (_, images, labels) = load_partition(
        &manifest,
        &split,
        Partition::Train,
        manifest.canonical_resolution,
    )?;
    let cfg = BowConfig {
        descriptor,
        kmeans: KMeansConfig {
            k: a.k,
            seed: a.seed,
            max_iters: a.kmeans_iters,
            ..KMeansConfig::default()
        },
        pool_cap: a.pool_cap,
        subsample_seed: a.seed,
        svm: SvmConfig {
            lambda: a.svm_lambda,
            epochs: a.svm_epochs,
            seed: a.seed,
            ..SvmConfig::default()
        },
    };
    let mut clf = BowClassifier::fit(&images, &labels, &cfg)?;
    clf.svm.trained_on = split.config_hash.clone();
    let preds = clf.predict_all(&images)?;
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|((p, _), l)| p == *l)
        .count();
    clf.save(&dir.join(format!("{}.bin", a.name)))?;
    let summary = TrainSummary {
        config_hash: &hash,
        split_hash: split.config_hash.as_deref(),
        kind: descriptor.name(),
        classes: clf.svm.classes.clone(),
        train_pages: images.len(),
        train_accuracy: Some(correct as f64 / images.len() as f64),
        log: None,
    };
    artifact::write_json(&dir.join(format!("{}.train.json", a.name)), &summary)?;
    println!("train accuracy {:.4}", correct as f64 / images.len() as f64);
    Ok(())
}

fn train_cnn(a: &TrainCnnArgs) -> Result<()> {
    let (split, manifest) = load_split(&a.split)?;
    let (dir, hash) = start("train-cnn", a, &a.out)?;
    let res = a
        .resolution
        .map_or(manifest.canonical_resolution, |r| [r, r]);
    let base = NetworkSpec::s_net(manifest.num_classes(), res);
    let spec = match (a.widths, a.hidden) {
        (None, None) => base,
        (w, h) => NetworkSpec::s_net_with(
            manifest.num_classes(),
            res,
            w.unwrap_or([16, 32, 64]),
            h.unwrap_or(128),
        ),
    };
    let cfg = TrainConfig {
        schedule: TrainingSchedule {
            base_lr: a.lr,
            momentum: a.momentum,
            decay_factor: a.decay_factor,
            decay_interval_iters: a.decay_every,
            train_batch: a.batch,
            val_batch: a.val_batch,
            max_iters: a.iters,
        },
        seed: a.seed,
        flip: !a.no_flip,
        eval_interval: a.eval_interval,
    };
    let (model, log, read) = train_from_split(&manifest, &split, &spec, &cfg)?;
    model.save(&dir.join(format!("{}.bin", a.name)))?;
    let summary = TrainSummary {
        config_hash: &hash,
        split_hash: split.config_hash.as_deref(),
        kind: "cnn",
        classes: model.classes.clone(),
        train_pages: read.train.len(),
        train_accuracy: None,
        log: Some(&log),
    };
    artifact::write_json(&dir.join(format!("{}.train.json", a.name)), &summary)?;
    println!(
        "best validation accuracy {:.4} at iteration {}",
        log.best_val_accuracy, log.best_iter
    );
    Ok(())
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Instance => "instance",
        Protocol::BookInstance => "book_instance",
        Protocol::Book => "book",
    }
}

fn write_eval(dir: &Path, name: &str, mut report: EvalReport, hash: String) -> Result<()> {
    report.config_hash = Some(hash);
    let base = format!("{name}.{}", protocol_name(report.protocol));
    report.save(&dir.join(format!("{base}.eval.json")))?;
    report.save_heatmap(&dir.join(format!("{base}.confusion.png")))?;
    println!(
        "{} accuracy {:.4}",
        protocol_name(report.protocol),
        report.accuracy
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = AnyClassifier::load(&a.model)?;
    let (split, manifest) = load_split(&a.split)?;
    let protocol = match (a.protocol, split.kind) {
        (Some(PageProtocol::Instance), SplitKind::Instance) | (None, SplitKind::Instance) => {
            Protocol::Instance
        }
        (Some(PageProtocol::BookInstance), SplitKind::BookBased) | (None, SplitKind::BookBased) => {
            Protocol::BookInstance
        }
        (Some(p), k) => {
            return Err(Error::invalid(format!(
                "protocol {p:?} does not match a {k:?} split"
            )))
        }
    };
    let (dir, hash) = start("eval", a, &a.out)?;
    let report = evaluate_instances(&model, &manifest, &split, protocol)?;
    write_eval(
        &dir,
        &a.name.clone().unwrap_or_else(|| stem(&a.model)),
        report,
        hash,
    )
}

fn eval_books(a: &EvalBooksArgs) -> Result<()> {
    let model = AnyClassifier::load(&a.model)?;
    let (split, manifest) = load_split(&a.split)?;
    if split.kind != SplitKind::BookBased {
        return Err(Error::invalid("book evaluation needs a book-based split"));
    }
    let (dir, hash) = start("eval-books", a, &a.out)?;
    let report = evaluate_books(&model, &manifest, &split)?;
    write_eval(
        &dir,
        &a.name.clone().unwrap_or_else(|| stem(&a.model)),
        report,
        hash,
    )
}

fn transfer_config(t: &TransferFlags, seed: u64) -> Result<TransferConfig> {
    let taps: Vec<&str> = t
        .style_taps
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if taps.is_empty() && t.style_weight > 0.0 {
        return Err(Error::invalid("--style-taps is empty"));
    }
    let w = 1.0 / taps.len().max(1) as f64;
    let cfg = TransferConfig {
        content_tap: t.content_tap.clone(),
        style_taps: taps
            .iter()
            .map(|tap| StyleTap {
                tap: (*tap).into(),
                weight: w,
            })
            .collect(),
        content_weight: t.content_weight,
        style_weight: t.style_weight,
        steps: t.steps,
        step_size: t.step_size,
        momentum: t.transfer_momentum,
        seed,
        init: match t.init {
            InitArg::Content => TransferInit::Content,
            InitArg::Noise => TransferInit::Noise,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TransferSummary {
    config_hash: String,
    initial_loss: f64,
    final_loss: f64,
    best_step: usize,
    halvings: Vec<usize>,
    predicted_class: u32,
}

fn transfer(a: &TransferArgs) -> Result<()> {
    let cfg = transfer_config(&a.transfer, a.seed)?;
    let model = AnyClassifier::load(&a.model)?.network(&a.model)?;
    let content = image::load(&a.content)?;
    let style = image::load(&a.style)?;
    let (dir, hash) = start("transfer", a, &a.out)?;
    let r = transfer_with_model(&model, &content, &style, &cfg)?;
    let (predicted_class, _) = model.classify_image(&r.image)?;
    image::save(&r.image, &dir.join(format!("{}.png", a.name)))?;
    write_loss_csv(&dir.join(format!("{}.loss.csv", a.name)), &r.trace)?;
    let summary = TransferSummary {
        config_hash: hash,
        initial_loss: r.initial_loss(),
        final_loss: r.final_loss(),
        best_step: r.best_step,
        halvings: r.halvings.clone(),
        predicted_class,
    };
    artifact::write_json(&dir.join(format!("{}.transfer.json", a.name)), &summary)?;
    println!(
        "loss {:.4} -> {:.4}, classified as {predicted_class}",
        summary.initial_loss, summary.final_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct PairRecord {
    content_page: String,
    content_class: u32,
    style_page: String,
    style_class: u32,
    initial_loss: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct CaptureSummary {
    config_hash: String,
    split_hash: Option<String>,
    chance: f64,
    pairs: Vec<PairRecord>,
    capture: CaptureReport,
}

/// Seeded cross-class pairs from the test partition: pair `i` takes its style
/// from class `i mod n` and its content from a different random class.
fn draw_pairs<'m>(
    pages: &[&'m LabeledPage],
    classes: &[u32],
    count: usize,
    seed: u64,
) -> Result<Vec<(&'m LabeledPage, &'m LabeledPage)>> {
    let by_class: Vec<Vec<&LabeledPage>> = classes
        .iter()
        .map(|&c| {
            pages
                .iter()
                .copied()
                .filter(|p| p.illustrator_id == c)
                .collect()
        })
        .collect();
    let usable: Vec<usize> = (0..classes.len())
        .filter(|&i| !by_class[i].is_empty())
        .collect();
    if usable.len() < 2 {
        return Err(Error::data(
            "cross-class pairs need test pages from at least two illustrators",
        ));
    }
    let mut rng = artifact::rng(seed, 0xCA97);
    Ok((0..count)
        .map(|i| {
            let s = usable[i % usable.len()];
            let c = usable
                [(i % usable.len() + 1 + rng.random_range(0..usable.len() - 1)) % usable.len()];
            let style = by_class[s][rng.random_range(0..by_class[s].len())];
            let content = by_class[c][rng.random_range(0..by_class[c].len())];
            (content, style)
        })
        .collect())
}

fn capture_rate(a: &CaptureRateArgs) -> Result<()> {
    let cfg = transfer_config(&a.transfer, a.seed)?;
    if a.pairs == 0 {
        return Err(Error::invalid("--pairs must be at least 1"));
    }
    let model = AnyClassifier::load(&a.model)?.network(&a.model)?;
    let (split, manifest) = load_split(&a.split)?;
    let (dir, hash) = start("capture-rate", a, &a.out)?;
    let test = split.pages(&manifest, Partition::Test);
    let pairs = draw_pairs(&test, &model.classes, a.pairs, a.seed)?;
    let results: Vec<TransferResult> = pairs
        .iter()
        .map(|(c, s)| {
            transfer_with_model(
                &model,
                &manifest.load_page(c)?,
                &manifest.load_page(s)?,
                &cfg,
            )
        })
        .collect::<Result<_>>()?;
    let stylized: Vec<(ImageBuffer, u32)> = results
        .iter()
        .zip(&pairs)
        .map(|(r, (_, s))| (r.image.clone(), s.illustrator_id))
        .collect();
    let capture = style_capture_rate(&model, &stylized)?;
    if a.save_images {
        for (i, (img, _)) in stylized.iter().enumerate() {
            image::save(img, &dir.join(format!("pair{i:03}.png")))?;
        }
    }
    let summary = CaptureSummary {
        config_hash: hash,
        split_hash: split.config_hash.clone(),
        chance: 1.0 / model.classes.len() as f64,
        pairs: pairs
            .iter()
            .zip(&results)
            .map(|((c, s), r)| PairRecord {
                content_page: c.page_id.clone(),
                content_class: c.illustrator_id,
                style_page: s.page_id.clone(),
                style_class: s.illustrator_id,
                initial_loss: r.initial_loss(),
                final_loss: r.final_loss(),
            })
            .collect(),
        capture,
    };
    artifact::write_json(&dir.join("capture.json"), &summary)?;
    println!(
        "style capture rate {:.4} (chance {:.4})",
        summary.capture.rate, summary.chance
    );
    Ok(())
}

/// Pages of `manifest`, restricted to a split's training partition if given.
fn candidate_pages<'m>(
    manifest: &'m CorpusManifest,
    split: Option<&Path>,
) -> Result<Vec<&'m LabeledPage>> {
    match split {
        None => Ok(manifest.pages.iter().collect()),
        Some(path) => {
            let split = SplitAssignment::load(path)?;
            split.validate(manifest)?;
            Ok(split.pages(manifest, Partition::Train))
        }
    }
}

#[derive(Serialize)]
struct MiningSummary<'a> {
    config_hash: String,
    class: u32,
    positives: usize,
    negatives: usize,
    clusters: &'a [crate::mining::ClusterReport],
    page_ranking: Vec<crate::mining::PageFirings>,
}

fn mine_patches(a: &MinePatchesArgs) -> Result<()> {
    let manifest = CorpusManifest::load(&a.manifest)?;
    if !manifest.class_ids().contains(&a.class) {
        return Err(Error::invalid(format!(
            "no illustrator with id {}",
            a.class
        )));
    }
    let pages = candidate_pages(&manifest, a.split.as_deref())?;
    let cfg = MiningConfig {
        patch_size: a.patch_size,
        stride: a.stride,
        clusters: a.clusters,
        rounds: a.rounds,
        top_m: a.top_m,
        min_cluster_size: a.min_cluster_size,
        negative_cap: a.negative_cap,
        seed: a.seed,
        ..MiningConfig::default()
    };
    cfg.validate()?;
    let (dir, hash) = start("mine-patches", a, &a.out)?;
    let images: BTreeMap<String, ImageBuffer> = pages
        .iter()
        .map(|p| Ok((p.page_id.clone(), manifest.load_page(p)?)))
        .collect::<Result<_>>()?;
    let groups: Vec<String> = pages
        .iter()
        .map(|p| format!("{}/{}", p.illustrator_id, p.book_id))
        .collect();
    let mining: Vec<(bool, MiningPage<'_>)> = pages
        .iter()
        .zip(&groups)
        .map(|(p, g)| {
            (
                p.illustrator_id == a.class,
                MiningPage {
                    page_id: &p.page_id,
                    group: g,
                    image: &images[&p.page_id],
                },
            )
        })
        .collect();
    let (pos, neg): (Vec<_>, Vec<_>) = mining.into_iter().partition(|(is_pos, _)| *is_pos);
    let pos: Vec<MiningPage<'_>> = pos.into_iter().map(|(_, m)| m).collect();
    let neg: Vec<MiningPage<'_>> = neg.into_iter().map(|(_, m)| m).collect();
    let clusters = mine_discriminative_patches(&pos, &neg, &cfg)?;
    let shown = &clusters[..a.show.min(clusters.len())];
    let page_ranking = if shown.is_empty() {
        Vec::new()
    } else {
        let refs: Vec<(&str, &ImageBuffer)> = pos.iter().map(|m| (m.page_id, m.image)).collect();
        representatives_to_images(shown, &refs, cfg.patch_size, cfg.stride)?
    };
    if let Some(m) = cluster_montage(shown, &images, cfg.top_m)? {
        image::save(&m, &dir.join("clusters.png"))?;
    }
    let summary = MiningSummary {
        config_hash: hash,
        class: a.class,
        positives: pos.len(),
        negatives: neg.len(),
        clusters: &clusters,
        page_ranking,
    };
    artifact::write_json(&dir.join("clusters.json"), &summary)?;
    println!(
        "{} clusters kept; top purity {:.3}",
        clusters.len(),
        clusters.first().map_or(0.0, |c| c.purity)
    );
    Ok(())
}

#[derive(Serialize)]
struct RepresentativesSummary {
    config_hash: String,
    ranking: RankingReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    misclassified_top_k: Option<usize>,
}

fn representatives(a: &RepresentativesArgs) -> Result<()> {
    let feature: RepresentativeFeature = a.feature.parse()?;
    let manifest = CorpusManifest::load(&a.manifest)?;
    let model = a.model.as_deref().map(AnyClassifier::load).transpose()?;
    let network = match (&model, feature) {
        (Some(AnyClassifier::Cnn(m)), _) => Some(m),
        (_, RepresentativeFeature::Embed) => {
            return Err(Error::invalid("embed features need --model with a network"))
        }
        _ => None,
    };
    let pages: Vec<&LabeledPage> = manifest
        .pages
        .iter()
        .filter(|p| p.illustrator_id == a.class)
        .collect();
    if pages.is_empty() {
        return Err(Error::invalid(format!(
            "no pages for illustrator {}",
            a.class
        )));
    }
    let (dir, hash) = start("representatives", a, &a.out)?;
    let images: Vec<ImageBuffer> = pages
        .iter()
        .map(|p| manifest.load_page(p))
        .collect::<Result<_>>()?;
    let res = a
        .resolution
        .map_or(manifest.canonical_resolution, |r| [r, r]);
    let feats = page_features(feature, &images, res, network)?;
    let candidates: Vec<(String, Vec<f64>)> =
        pages.iter().map(|p| p.page_id.clone()).zip(feats).collect();
    let cfg = SelectConfig {
        target: Some(a.target),
        fraction: a.fraction,
        rounds: a.rounds,
    };
    let mut ranking = select_representatives(&candidates, feature.name(), &cfg)?;
    ranking.target_class = Some(a.class);
    let index: BTreeMap<&str, usize> = pages
        .iter()
        .enumerate()
        .map(|(i, p)| (p.page_id.as_str(), i))
        .collect();
    let ranked: Vec<ImageBuffer> = ranking
        .kept
        .iter()
        .take(a.top_k)
        .map(|r| images[index[r.page_id.as_str()]].clone())
        .collect();
    let misclassified_top_k = model
        .as_ref()
        .map(|m| representative_quality(m, &ranked, a.class, a.top_k))
        .transpose()?;
    if let Some(m) = image::montage(&ranked, 5, 2) {
        image::save(&m, &dir.join("representatives.png"))?;
    }
    artifact::write_json(
        &dir.join("representatives.json"),
        &RepresentativesSummary {
            config_hash: hash,
            ranking,
            misclassified_top_k,
        },
    )?;
    if let Some(n) = misclassified_top_k {
        println!(
            "{n} of the top {} representatives misclassified",
            ranked.len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct IntrospectSummary {
    config_hash: String,
    tap: String,
    unit: usize,
    activation: Vec<f64>,
    crops: Vec<ActivationCrop>,
}

fn introspect(a: &IntrospectArgs) -> Result<()> {
    let model = AnyClassifier::load(&a.model)?.network(&a.model)?;
    let (dir, hash) = start("introspect", a, &a.out)?;
    let cfg = MaximizeConfig {
        steps: a.steps,
        step_size: a.step_size,
        l2_penalty: a.l2,
        seed: a.seed,
    };
    let m = maximize_unit(
        &model.params,
        &model.spec,
        model.mean.image(),
        &a.tap,
        a.unit,
        &cfg,
    )?;
    image::save(&m.image, &dir.join("maximized.png"))?;
    let mut crops = Vec::new();
    if let Some(path) = &a.split {
        let (split, manifest) = load_split(path)?;
        let res = model.resolution();
        let pages = split.pages(&manifest, Partition::Test);
        let loaded: BTreeMap<String, ImageBuffer> = pages
            .iter()
            .map(|p| {
                Ok((
                    p.page_id.clone(),
                    manifest.load_page(p)?.resize(res[0], res[1]),
                ))
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<(String, crate::numerics::Tensor)> = loaded
            .iter()
            .map(|(id, img)| Ok((id.clone(), model.preprocess(img)?)))
            .collect::<Result<_>>()?;
        crops = top_activating_crops(&model.params, &model.spec, &a.tap, a.unit, &inputs, a.top_k)?;
        let tiles: Vec<ImageBuffer> = crops
            .iter()
            .map(|c| loaded[&c.page_id].crop(c.x, c.y, c.width, c.height))
            .collect::<Result<_>>()?;
        if let Some(mont) = image::montage(&tiles, 3, 2) {
            image::save(&mont, &dir.join("top_crops.png"))?;
        }
    }
    let summary = IntrospectSummary {
        config_hash: hash,
        tap: a.tap.clone(),
        unit: a.unit,
        activation: m.activation,
        crops,
    };
    artifact::write_json(&dir.join("introspect.json"), &summary)?;
    println!(
        "unit {} at `{}`: activation {:.4} -> {:.4}",
        a.unit,
        a.tap,
        summary.activation.first().copied().unwrap_or_default(),
        summary.activation.last().copied().unwrap_or_default()
    );
    Ok(())
}
