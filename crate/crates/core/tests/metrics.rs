mod common;

use common::randomize;
use proptest::prelude::*;
use prunelab::attacks::{AttackKind, AttackSpec};
use prunelab::data::{synth_shapes, DatasetSplit, SynthSpec};
use prunelab::metrics::{
    default_attacks, delta_report, delta_table_csv, evaluate_report, evaluate_under_attack,
    pearson_r, transfer_csv, transfer_matrix,
};
use prunelab::network::{ArchSpec, Network};
use prunelab::train::{evaluate, train, TrainHyper};

fn data() -> (DatasetSplit, DatasetSplit) {
    synth_shapes(&SynthSpec {
        train_per_class: 32,
        test_per_class: 24,
        image_side: 16,
        noise_sigma: 0.1,
        seed: 8,
    })
    .unwrap()
}

fn trained(seed: u64, epochs: usize) -> Network {
    let (train_set, _) = data();
    let mut net = Network::build(&ArchSpec::mini_vgg(4, 4, 3, 16), seed).unwrap();
    let hyper = TrainHyper {
        batch_size: 16,
        ..TrainHyper::standard(epochs, 16, seed)
    };
    train(&mut net, &train_set, &hyper, &[]).unwrap();
    net
}

#[test]
fn null_attacks_reproduce_clean_accuracy_exactly() {
    let (_, test) = data();
    let net = trained(1, 2);
    let clean = evaluate(&net, &test).unwrap();
    for kind in [
        AttackKind::Occlusion { side_px: 0 },
        AttackKind::Fgsm { alpha: 0.0 },
    ] {
        let acc =
            evaluate_under_attack(&net, &test, &AttackSpec::white_box(kind), None, 0).unwrap();
        assert_eq!(acc, clean);
    }
}

#[test]
fn transfer_diagonal_is_white_box_and_copies_are_symmetric() {
    let (_, test) = data();
    let a = trained(1, 2);
    let b = trained(2, 2);
    let m = transfer_matrix(&[("a".into(), &a), ("b".into(), &b)], &test, 8.0 / 255.0).unwrap();
    let white = |n: &Network| {
        evaluate_under_attack(
            n,
            &test,
            &AttackSpec::white_box(AttackKind::fgsm()),
            None,
            0,
        )
        .unwrap()
    };
    assert_eq!(m.cell("a", "a"), Some(white(&a)));
    assert_eq!(m.cell("b", "b"), Some(white(&b)));
    assert_eq!(
        transfer_matrix(&[("a".into(), &a), ("b".into(), &b)], &test, 8.0 / 255.0).unwrap(),
        m
    );

    let copies =
        transfer_matrix(&[("x".into(), &a), ("y".into(), &a)], &test, 8.0 / 255.0).unwrap();
    let v = copies.cells[0][0];
    assert!(copies.cells.iter().flatten().all(|&c| c == v));

    let csv = transfer_csv(&m).unwrap();
    assert!(csv.starts_with("source,a,b\na,"));
}

#[test]
fn transfer_rejects_class_mismatch() {
    let (_, test) = data();
    let a = trained(1, 1);
    let mut other = Network::build(&ArchSpec::mini_vgg(4, 5, 3, 16), 0).unwrap();
    randomize(&mut other, 0);
    assert!(transfer_matrix(&[("a".into(), &a), ("o".into(), &other)], &test, 0.03).is_err());
    assert!(transfer_matrix(&[("a".into(), &a)], &test, 0.03).is_err());
}

#[test]
fn fgsm_lowers_accuracy_of_a_trained_model() {
    let (_, test) = data();
    let net = trained(3, 8);
    let clean = evaluate(&net, &test).unwrap();
    let adv = evaluate_under_attack(
        &net,
        &test,
        &AttackSpec::white_box(AttackKind::fgsm()),
        None,
        0,
    )
    .unwrap();
    assert!(adv < clean, "{adv} vs {clean}");
}

#[test]
fn reports_and_tables_are_deterministic() {
    let (_, test) = data();
    let (a, b) = (trained(1, 2), trained(2, 2));
    let attacks = default_attacks(16);
    let ra = evaluate_report(&a, "a", &test, &attacks, 5).unwrap();
    let rb = evaluate_report(&b, "b", &test, &attacks, 5).unwrap();
    assert_eq!(ra.acc_adv.len(), 6);
    let d = delta_report(&ra, &rb).unwrap();
    let t1 = delta_table_csv(&[("b vs a".into(), d.clone())]).unwrap();
    let rb2 = evaluate_report(&b, "b", &test, &attacks, 5).unwrap();
    let t2 = delta_table_csv(&[("b vs a".into(), delta_report(&ra, &rb2).unwrap())]).unwrap();
    assert_eq!(t1, t2);
    assert!(t1.starts_with(
        "row,clean,fgsm,occlusion,gaussian_noise,box_blur,contrast,brightness,avg_with_clean,avg_attacks_only\n"
    ));
    for r in &d.rows {
        let (u, p) = if r.column == "clean" {
            (ra.acc_clean, rb.acc_clean)
        } else {
            (ra.adv(&r.column).unwrap(), rb.adv(&r.column).unwrap())
        };
        assert!((r.delta_pp - (p - u) * 100.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 3..20),
        noise in prop::collection::vec(-10.0f64..10.0, 20),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
        if let Ok(r) = pearson_r(&xs, &ys) {
            let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let yt: Vec<f64> = ys.iter().map(|y| y / a - b).collect();
            let r2 = pearson_r(&xt, &yt).unwrap();
            prop_assert!((r - r2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
