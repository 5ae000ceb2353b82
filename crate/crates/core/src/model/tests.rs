use super::*;
use crate::augment::{apply, TransformId};
use crate::dataset::generate_synthetic;
use crate::tensor_core::{finite_diff_grad, max_relative_error};

fn sample_image() -> LabeledImage {
    let (base, _) = generate_synthetic(8, 5, 20, 16, 7).unwrap();
    base.images[3].clone()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = ModelParams::init(8, 1, 1).unwrap();
    assert_eq!(a, ModelParams::init(8, 1, 1).unwrap());
    assert_ne!(a, ModelParams::init(8, 1, 2).unwrap());
    assert_eq!(a.classifier.weight.shape(), &[64, 8]);
    assert!(a.classifier.bias.data().iter().all(|&b| b == 0.0));
    assert!(a.ss_bn.gamma.data().iter().all(|&g| g == 1.0));
    assert!(matches!(ModelParams::init(1, 1, 0), Err(Error::Domain(_))));
}

#[test]
fn kaiming_bounds_hold() {
    let p = ModelParams::init(8, 1, 5).unwrap();
    let bound = (6.0f64 / 9.0).sqrt();
    assert!(p.blocks[0].kernels.data().iter().all(|v| v.abs() <= bound));
    let bound = (6.0f64 / 64.0).sqrt();
    assert!(p.classifier.weight.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn parameter_count_is_pinned() {
    // conv 144 + 4608 + 18432, bn 2·(16+32+64), classifier 64·8+8,
    // ss head 64·32+32 + 2·32 + 32·10+10.
    let p = ModelParams::init(8, 1, 0).unwrap();
    assert_eq!(p.parameter_count(), 26_402);
    assert_eq!(p.learnable().len(), 17);
    assert_eq!(p.named_tensors().len(), 25);
    let rgb = ModelParams::init(8, 3, 0).unwrap();
    assert_eq!(rgb.parameter_count(), 26_402 + 2 * 144);
}

#[test]
fn embedding_examples() {
    let p = ModelParams::init(8, 1, 3).unwrap();
    let zero = LabeledImage::new(vec![0; 256], 1, 16, 0, 0).unwrap();
    let v = p.embed(&zero).unwrap();
    assert_eq!(v.shape(), &[EMBED_DIM]);
    assert!(v.is_finite());

    let img = sample_image();
    let a = p.embed(&img).unwrap();
    assert_eq!(a, p.embed(&img).unwrap());
    let rotated = apply(&img, TransformId::ROTATE_180, 0);
    assert_ne!(a, p.embed(&rotated).unwrap());
}

#[test]
fn embed_rejects_wrong_geometry() {
    let p = ModelParams::init(8, 3, 3).unwrap();
    let gray = LabeledImage::new(vec![0; 256], 1, 16, 0, 0).unwrap();
    assert!(matches!(p.embed(&gray), Err(Error::ShapeMismatch(_))));
}

#[test]
fn batch_embedding_matches_single() {
    let p = ModelParams::init(8, 1, 3).unwrap();
    let (base, _) = generate_synthetic(8, 5, 20, 16, 7).unwrap();
    let imgs: Vec<&LabeledImage> = base.images.iter().take(4).collect();
    let rows = p.embed_batch(&imgs).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let single = p.embed(img).unwrap();
        for (x, y) in rows.row(i).iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn classify_and_ss_predict_shapes() {
    let p = ModelParams::init(8, 1, 3).unwrap();
    let logits = p.classify(&Tensor::zeros(&[EMBED_DIM])).unwrap();
    assert_eq!(logits, Tensor::zeros(&[8]));
    let v = p.embed(&sample_image()).unwrap();
    assert!(p.classify(&v).unwrap().is_finite());
    let s = p.ss_predict(&v, Mode::Eval).unwrap();
    assert_eq!(s.shape(), &[SS_CLASSES]);
    assert!(s.is_finite());
    assert!(matches!(
        p.classify(&Tensor::zeros(&[63])),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let p = ModelParams::init(8, 1, 9).unwrap();
    let v = p.embed(&sample_image()).unwrap().reshape(&[1, EMBED_DIM]).unwrap();
    let target = 3;
    let loss_of = |w: &Tensor, b: &Tensor| {
        let mut q = p.clone();
        q.classifier.weight = w.clone();
        q.classifier.bias = b.clone();
        let mut tape = Tape::new();
        let x = tape.constant(v.clone());
        let lp = q.classify(tape.value(x)).unwrap();
        let lp = tape.constant(lp);
        let ls = tape.log_softmax(lp).unwrap();
        tape.value(ls).data()[target]
    };
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let x = tape.constant(v.clone());
    let logits = p.classifier_logits(&mut tape, &bound, x).unwrap();
    let ls = tape.log_softmax(logits).unwrap();
    let picked = tape.pick_columns(ls, &[target]).unwrap();
    let loss = tape.sum(picked);
    tape.backward(loss).unwrap();
    let (wv, bv) = bound.classifier();
    let gw = tape.grad(wv).unwrap();
    let gb = tape.grad(bv).unwrap();
    let nw = finite_diff_grad(|w| loss_of(w, &p.classifier.bias), &p.classifier.weight, 1e-5);
    let nb = finite_diff_grad(|b| loss_of(&p.classifier.weight, b), &p.classifier.bias, 1e-5);
    assert!(max_relative_error(gw.data(), nw.data(), 1e-8) < 1e-5);
    assert!(max_relative_error(gb.data(), nb.data(), 1e-8) < 1e-5);
}

#[test]
fn running_statistics_move_only_in_training_mode() {
    let mut p = ModelParams::init(8, 1, 4).unwrap();
    let (base, _) = generate_synthetic(8, 5, 20, 16, 7).unwrap();
    let x = images_to_tensor(base.images.iter().take(6)).unwrap();

    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let input = tape.constant(x.clone());
    let out = p.forward(&mut tape, &bound, input, Mode::Eval).unwrap();
    let before = p.clone();
    p.update_running_stats(&tape, &out);
    assert_eq!(p, before);

    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let input = tape.constant(x);
    let out = p.forward(&mut tape, &bound, input, Mode::Train).unwrap();
    let stats = tape.batch_stats(out.bn_nodes[0]).unwrap().clone();
    p.update_running_stats(&tape, &out);
    let m0 = p.blocks[0].bn.running_mean.data()[0];
    assert!((m0 - 0.1 * stats.mean[0]).abs() < 1e-15);
    let unbiased = stats.var[0] * stats.count as f64 / (stats.count - 1) as f64;
    let v0 = p.blocks[0].bn.running_var.data()[0];
    assert!((v0 - (0.9 + 0.1 * unbiased)).abs() < 1e-15);
    // The learnable tensors are untouched.
    assert_eq!(p.blocks[0].kernels, before.blocks[0].kernels);
}

#[test]
fn checkpoint_round_trip_and_rejects_bad_magic() {
    let mut p = ModelParams::init(5, 1, 8).unwrap();
    p.ss_bn.running_var.data_mut()[3] = 0.125;
    let mut bytes = Vec::new();
    write_checkpoint(&p, &mut bytes).unwrap();
    assert_eq!(&bytes[..8], b"MGRCLCK1");
    assert_eq!(read_checkpoint(bytes.as_slice()).unwrap(), p);

    let mut again = Vec::new();
    write_checkpoint(&read_checkpoint(bytes.as_slice()).unwrap(), &mut again).unwrap();
    assert_eq!(bytes, again);

    bytes[0] = b'X';
    assert!(matches!(
        read_checkpoint(bytes.as_slice()),
        Err(Error::Format { offset: 0, .. })
    ));
}

#[test]
fn checkpoint_truncation_is_a_format_error() {
    let p = ModelParams::init(5, 1, 8).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&p, &mut bytes).unwrap();
    for cut in [9, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(read_checkpoint(&bytes[..cut]), Err(Error::Format { .. })),
            "cut {cut}"
        );
    }
}
