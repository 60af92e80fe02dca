use std::ffi::{CStr, CString};
use std::ptr;

use stylekit::convnet::{train_from_split, NetworkSpec, TrainConfig};
use stylekit::corpus::{
    default_styles, generate_synthetic_corpus, make_instance_split, SynthConfig,
};
use stylekit::evaluation::PageClassifier;
use stylekit::numerics::TrainingSchedule;
use stylekit_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(stylekit_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn load(path: &std::path::Path) -> (StylekitStatus, *mut StylekitModel) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { stylekit_model_load(c.as_ptr(), &mut model) };
    (status, model)
}

#[test]
fn classifies_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_styles: 3,
        books_per_style: 2,
        pages_per_book: 4,
        resolution: [32, 32],
        seed: 3,
    };
    let corpus =
        generate_synthetic_corpus(&cfg, &default_styles(3, 3), &dir.path().join("c")).unwrap();
    let split = make_instance_split(&corpus.manifest, [0.5, 0.25, 0.25], 0).unwrap();
    let spec = NetworkSpec::s_net_with(3, [16, 16], [4, 4, 4], 8);
    let schedule = TrainingSchedule {
        max_iters: 10,
        train_batch: 4,
        val_batch: 4,
        ..TrainingSchedule::desk_scale()
    };
    let train = TrainConfig {
        schedule,
        seed: 0,
        flip: false,
        eval_interval: 0,
    };
    let (model, _, _) = train_from_split(&corpus.manifest, &split, &spec, &train).unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();

    let (status, handle) = load(&path);
    assert_eq!(status, StylekitStatus::Ok);
    let n = unsafe { stylekit_model_num_classes(handle) };
    assert_eq!(n, 3);
    let mut ids = vec![0u32; n];
    assert_eq!(
        unsafe { stylekit_model_class_ids(handle, ids.as_mut_ptr(), n) },
        StylekitStatus::Ok
    );
    assert_eq!(ids, model.classes);

    let page = corpus
        .manifest
        .load_page(&corpus.manifest.pages[5])
        .unwrap();
    let rgb = page.to_rgb8();
    let mut class = 0u32;
    let mut conf = vec![0.0; n];
    let status = unsafe {
        stylekit_model_classify(
            handle,
            rgb.as_ptr(),
            page.height(),
            page.width(),
            &mut class,
            conf.as_mut_ptr(),
            n,
        )
    };
    assert_eq!(status, StylekitStatus::Ok);
    let requantized =
        stylekit::image::ImageBuffer::from_rgb8(page.height(), page.width(), &rgb).unwrap();
    let reloaded = stylekit::convnet::TrainedModel::load(&path).unwrap();
    let (want, want_conf) = reloaded.classify(&requantized).unwrap();
    assert_eq!(class, want);
    assert_eq!(conf, want_conf);

    let mut small = [0.0; 1];
    let status = unsafe {
        stylekit_model_classify(
            handle,
            rgb.as_ptr(),
            page.height(),
            page.width(),
            &mut class,
            small.as_mut_ptr(),
            1,
        )
    };
    assert_eq!(status, StylekitStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    unsafe { stylekit_model_free(handle) };
}

#[test]
fn reports_load_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (status, handle) = load(&dir.path().join("missing.bin"));
    assert_eq!(status, StylekitStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("missing.bin"));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"definitely not a model file").unwrap();
    assert_eq!(load(&junk).0, StylekitStatus::Decode);

    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { stylekit_model_load(ptr::null(), &mut model) },
        StylekitStatus::InvalidArgument
    );
    assert_eq!(unsafe { stylekit_model_num_classes(ptr::null()) }, 0);
    unsafe { stylekit_model_free(ptr::null_mut()) };
}
