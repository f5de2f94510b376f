use prunelab::autodiff::Tape;
use prunelab::checkpoint::{load_checkpoint_with_optimizer, save_checkpoint_with_optimizer};
use prunelab::data::{synth_shapes, AugmentationPolicy, DatasetSplit, SynthSpec};
use prunelab::network::{ArchSpec, Network};
use prunelab::optim::Sgd;
use prunelab::train::{evaluate, train, train_with, TrainHyper};
use prunelab::Tensor;

fn shapes(per_class: usize, seed: u64) -> (DatasetSplit, DatasetSplit) {
    synth_shapes(&SynthSpec {
        train_per_class: per_class,
        test_per_class: 64,
        image_side: 16,
        noise_sigma: 0.1,
        seed,
    })
    .unwrap()
}

#[test]
fn mini_vgg_fits_the_synthetic_shapes() {
    let (train_set, _) = shapes(256, 7);
    assert_eq!(train_set.len(), 1024);
    let mut net = Network::build(&ArchSpec::mini_vgg(8, 4, 3, 16), 7).unwrap();
    let out = train(&mut net, &train_set, &TrainHyper::standard(20, 16, 7), &[]).unwrap();
    assert!(out.history.iter().all(|s| s.loss.is_finite()));
    let acc = evaluate(&net, &train_set).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

/// Softmax regression on raw pixels, full-batch gradient descent.
fn linear_probe(train_set: &DatasetSplit, test_set: &DatasetSplit) -> f64 {
    let d: usize = train_set.image_shape().iter().product();
    let flat =
        |s: &DatasetSplit| Tensor::new(vec![s.len(), d], s.images.values().to_vec()).unwrap();
    let (x_train, x_test) = (flat(train_set), flat(test_set));
    let mut w = Tensor::zeros(&[d, 4]);
    let mut b = Tensor::zeros(&[4]);
    let mut opt = Sgd::new(0.5, 0.9, 0.0);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let (wv, bv) = (tape.param(&w), tape.param(&b));
        let z = tape.dense(x, wv, bv).unwrap();
        let loss = tape.softmax_cross_entropy(z, &train_set.labels).unwrap();
        tape.backward(loss).unwrap();
        w.accumulate_grad(tape.grad(wv).unwrap()).unwrap();
        b.accumulate_grad(tape.grad(bv).unwrap()).unwrap();
        opt.step([("w".to_string(), &mut w), ("b".to_string(), &mut b)])
            .unwrap();
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_test);
    let (wv, bv) = (tape.constant(w), tape.constant(b));
    let z = tape.dense(x, wv, bv).unwrap();
    let pred = tape.value(z).argmax_rows();
    pred.iter()
        .zip(&test_set.labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / test_set.len() as f64
}

#[test]
fn synthetic_shapes_are_not_linearly_separable() {
    let (train_set, test_set) = shapes(256, 7);
    let acc = linear_probe(&train_set, &test_set);
    assert!(acc < 0.9, "linear probe test accuracy {acc}");
}

#[test]
fn resuming_from_a_snapshot_reproduces_the_run_bitwise() {
    let (train_set, _) = shapes(16, 3);
    let arch = ArchSpec::mini_resnet(4, 4, 3, 16);
    let hyper = TrainHyper {
        batch_size: 16,
        ..TrainHyper::standard(4, 16, 11)
    };
    let mut full = Network::build(&arch, 11).unwrap();
    let run = train(&mut full, &train_set, &hyper, &[2]).unwrap();

    let snap = run.snapshot(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint_with_optimizer(&snap.network, Some(&snap.optimizer), dir.path()).unwrap();
    let (mut resumed, opt) = load_checkpoint_with_optimizer(dir.path()).unwrap();
    let mut opt = opt.unwrap();
    assert_eq!(resumed.epoch, 2);
    let rest = train_with(&mut resumed, &mut opt, &train_set, &hyper, &[]).unwrap();

    assert_eq!(rest.history, run.history[2..]);
    let bits = |n: &Network| -> Vec<u32> {
        n.params()
            .iter()
            .flat_map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(bits(&resumed), bits(&full));
    assert_eq!(resumed, full);
}

#[test]
fn same_seed_trains_identically() {
    let (train_set, _) = shapes(8, 1);
    let hyper = TrainHyper {
        batch_size: 8,
        augmentation: AugmentationPolicy::for_side(16),
        ..TrainHyper::standard(2, 16, 4)
    };
    let go = || {
        let mut n = Network::build(&ArchSpec::mini_vgg(4, 4, 3, 16), 4).unwrap();
        let out = train(&mut n, &train_set, &hyper, &[]).unwrap();
        (n, out.history)
    };
    assert_eq!(go(), go());
}
