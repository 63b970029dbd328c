use lesionforge::evaluator::cv::check_leakage;
use lesionforge::evaluator::{run_cv, ClassifierConfig, CvConfig, SynthBank, SynthImage};
use lesionforge::phantom::{generate_dataset, Dataset, Label, PhantomConfig};
use lesionforge::Error;

fn small_dataset() -> Dataset {
    let cfg = PhantomConfig {
        n_normal: 9,
        n_lesion: 15,
        image_size: 32,
        seed: 3,
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg).unwrap()
}

fn bank_for(ds: &Dataset, per_source: usize) -> SynthBank {
    let mut bank = SynthBank::new();
    for s in ds.samples.iter().filter(|s| s.label == Label::Lesion) {
        for k in 0..per_source {
            bank.push(SynthImage {
                source_id: s.id.clone(),
                image: s.image.gaussian_blur(0.5 + k as f32),
                mask: s.union_mask(),
                boxes: s.boxes.clone(),
            });
        }
    }
    bank
}

fn config(oversample_factor: usize) -> CvConfig {
    let classifier = ClassifierConfig {
        epochs: 3,
        widths: [4, 8, 8],
        ..ClassifierConfig::default()
    };
    CvConfig {
        k: 3,
        oversample_factor,
        classifier,
        seed: 11,
    }
}

#[test]
fn without_synth_ignores_the_bank() {
    let ds = small_dataset();
    let full = run_cv(&ds, &bank_for(&ds, 2), &config(2), false, 1).unwrap();
    let empty = run_cv(&ds, &SynthBank::new(), &config(2), false, 1).unwrap();
    assert_eq!(full, empty);
    assert!(full.folds.iter().all(|f| f.n_synthetic == 0));
}

#[test]
fn zero_oversampling_matches_baseline() {
    let ds = small_dataset();
    let bank = bank_for(&ds, 2);
    let mut with = run_cv(&ds, &bank, &config(0), true, 1).unwrap();
    let without = run_cv(&ds, &bank, &config(0), false, 1).unwrap();
    with.use_synth = false;
    assert_eq!(with, without);
}

#[test]
fn synthetics_only_join_training_folds() {
    let ds = small_dataset();
    let arm = run_cv(&ds, &bank_for(&ds, 2), &config(2), true, 2).unwrap();
    let lesions = ds.count(Label::Lesion);
    let total_synth: usize = arm.folds.iter().map(|f| f.n_synthetic).sum();
    // Each lesion original is in the training side of k-1 folds.
    assert_eq!(total_synth, lesions * 2 * 2);
    assert!(arm.folds.iter().all(|f| (0.0..=1.0).contains(&f.accuracy)));
}

#[test]
fn leakage_is_rejected() {
    let test_ids = vec!["s0003".to_string()];
    assert!(check_leakage(&["s0001", "s0002"], &test_ids).is_ok());
    assert!(matches!(
        check_leakage(&["s0001", "s0003"], &test_ids),
        Err(Error::Leakage(_))
    ));
}

#[test]
fn worker_count_does_not_change_results() {
    let ds = small_dataset();
    let bank = bank_for(&ds, 1);
    let a = run_cv(&ds, &bank, &config(1), true, 1).unwrap();
    let b = run_cv(&ds, &bank, &config(1), true, 3).unwrap();
    assert_eq!(a, b);
}
