use paddyspec_nn::ops::activation::softmax;
use paddyspec_nn::ops::conv::conv2d_forward;
use paddyspec_nn::ops::loss::weighted_cross_entropy;
use paddyspec_nn::{AdamState, ResNet18, ResNetConfig, Tape, Tensor};
use proptest::prelude::*;

fn model(channels: usize, seed: u64) -> ResNet18<f32> {
    ResNet18::new(ResNetConfig {
        in_channels: channels,
        num_classes: 3,
        seed,
    })
    .unwrap()
}

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect()).unwrap()
}

#[test]
fn parameter_shapes_follow_the_architecture() {
    let m = model(4, 0);
    let named = m.named_parameters();
    let shape = |name: &str| named.iter().find(|(n, _)| n == name).map(|(_, t)| t.shape().to_vec());
    assert_eq!(shape("stem.conv.weight"), Some(vec![64, 4, 7, 7]));
    assert_eq!(named.last().unwrap().1.shape(), &[3]);
    // 1 stem conv + 16 block convs + 3 projection convs, each followed by a batchnorm
    let convs = named.iter().filter(|(_, t)| t.rank() == 4).count();
    assert_eq!(convs, 20);
    assert_eq!(m.batchnorms().len(), 20);
    let names: std::collections::HashSet<_> = named.iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names.len(), named.len(), "duplicate parameter names");
}

#[test]
fn checkpoint_restores_identical_outputs() {
    let mut m = model(3, 9);
    let x = ramp(&[2, 3, 32, 32]);
    // move running statistics away from their initial values
    m.forward(&x, paddyspec_nn::Mode::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.psck");
    m.save(&path, &[("note".into(), "test".into())]).unwrap();
    let (back, archive) = ResNet18::<f32>::load(&path).unwrap();
    assert_eq!(archive.meta("note"), Some("test"));
    let (la, _) = m.predict(&x).unwrap();
    let (lb, _) = back.predict(&x).unwrap();
    assert_eq!(la.data(), lb.data());
}

#[test]
fn single_and_double_precision_agree() {
    let m32 = model(3, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.psck");
    m32.save(&path, &[]).unwrap();
    let (m64, _) = ResNet18::<f64>::load(&path).unwrap();
    let x = ramp(&[2, 3, 32, 32]);
    let (_, p32) = m32.predict(&x).unwrap();
    let (_, p64) = m64.predict(&x.cast::<f64>()).unwrap();
    for (a, b) in p32.data().iter().zip(p64.data()) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn adam_steps_reduce_the_loss_on_a_fixed_batch() {
    let mut m = model(3, 5);
    let x = ramp(&[4, 3, 32, 32]);
    let labels = [0usize, 1, 2, 1];
    let weights = [1.0, 0.5, 2.0];
    let mut adam = AdamState::<f32>::default();
    let mut losses = Vec::new();
    for _ in 0..5 {
        let (loss, stats) = {
            let mut tape = Tape::new();
            let input = tape.constant(&x).unwrap();
            let f = m.forward_tape(&mut tape, input, paddyspec_nn::Mode::Train).unwrap();
            let l = tape.weighted_cross_entropy(f.logits, &labels, &weights).unwrap();
            let loss = tape.value(l).data()[0];
            let mut grads = tape.backward(l).unwrap();
            let params = f.params.clone();
            drop(tape);
            m.store_gradients(&mut grads, &params).unwrap();
            (loss, f.batch_stats)
        };
        m.apply_batch_stats(&stats);
        adam.step(&mut m.parameters_mut(), 1e-3).unwrap();
        losses.push(loss);
    }
    assert!(losses[4] < losses[0], "{losses:?}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 6)) {
        let p = softmax(&Tensor::<f64>::new(&[2, 3], v).unwrap()).unwrap();
        for row in p.data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(
        v in prop::collection::vec(-10.0f64..10.0, 9),
        labels in prop::collection::vec(0usize..3, 3),
        w in prop::array::uniform3(0.1f64..5.0),
    ) {
        let out = weighted_cross_entropy(&Tensor::<f64>::new(&[3, 3], v).unwrap(), &labels, &w).unwrap();
        prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
    }

    #[test]
    fn convolution_is_linear_in_the_input(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 5),
        b in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 5),
        k in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 3 * 3),
        s in -2.0f64..2.0,
    ) {
        let w = Tensor::new(&[3, 2, 3, 3], k).unwrap();
        let ta = Tensor::new(&[1, 2, 5, 5], a.clone()).unwrap();
        let tb = Tensor::new(&[1, 2, 5, 5], b.clone()).unwrap();
        let sum = Tensor::new(&[1, 2, 5, 5], a.iter().zip(&b).map(|(x, y)| x + s * y).collect()).unwrap();
        let ya = conv2d_forward(&ta, &w, None, 2, 1).unwrap();
        let yb = conv2d_forward(&tb, &w, None, 2, 1).unwrap();
        let ys = conv2d_forward(&sum, &w, None, 2, 1).unwrap();
        prop_assert_eq!(ys.shape(), &[1, 3, 3, 3]);
        for i in 0..ys.len() {
            prop_assert!((ys.data()[i] - ya.data()[i] - s * yb.data()[i]).abs() < 1e-12);
        }
    }
}
