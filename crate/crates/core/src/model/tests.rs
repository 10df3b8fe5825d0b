use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::normal_tensor;
use crate::prompt::WordVocab;

fn schema5() -> KeypointSchema {
    let names = ["left_eye", "right_eye", "nose", "neck", "root_of_tail"];
    KeypointSchema::new("five", names.iter().map(|s| (*s).into()).collect(), vec![(0, 1)], vec![(0, 2), (1, 2)], None)
        .unwrap()
}

fn toy(input: usize) -> ModelConfig {
    ModelConfig {
        input_size: (input, input),
        ..ModelConfig::toy(WordVocab::anatomy().vocab_size())
    }
}

fn image(seed: u64, size: usize) -> Tensor {
    normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[3, size, size], 1.0)
}

fn target(model: &ClampModel, size: f64) -> SampleTarget {
    let kps = [[0.2, 0.3], [0.7, 0.3], [0.5, 0.5], [0.5, 0.7], [0.9, 0.9]];
    let kps: Vec<[f64; 2]> = kps.iter().map(|p| [p[0] * size, p[1] * size]).collect();
    model.encode_targets(&kps, &[2, 2, 1, 0, 2]).unwrap()
}

#[test]
fn toy_stride_arithmetic() {
    let vocab = WordVocab::anatomy();
    let model = ClampModel::new(toy(256), &schema5(), &vocab).unwrap();
    assert_eq!(model.predictor.in_channels, 64 + 5);
    let t = target(&model, 256.0);
    let out = model.forward_train(&image(1, 256), &t).unwrap();
    assert_eq!((out.scores.channels(), out.scores.height(), out.scores.width()), (5, 8, 8));
    assert_eq!((out.heatmap.channels(), out.heatmap.height(), out.heatmap.width()), (5, 64, 64));
    assert_eq!(out.matches.values.shape(), &[5, 5]);
    assert!(out.scores.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    let l = out.losses;
    assert_eq!(l.total, l.l_pred + l.l_spatial + l.l_feature);
}

#[test]
fn zero_alphas_reduce_to_prediction_loss() {
    let vocab = WordVocab::anatomy();
    let mut model = ClampModel::new(toy(64), &schema5(), &vocab).unwrap();
    model.weights.alpha1 = 0.0;
    model.weights.alpha2 = 0.0;
    let out = model.forward_train(&image(2, 64), &target(&model, 64.0)).unwrap();
    assert_eq!(out.losses.total.to_bits(), out.losses.l_pred.to_bits());
}

#[test]
fn duplicate_images_give_identical_losses() {
    let vocab = WordVocab::anatomy();
    let model = ClampModel::new(toy(64), &schema5(), &vocab).unwrap();
    let t = target(&model, 64.0);
    let img = image(3, 64);
    let a = model.forward_train(&img, &t).unwrap().losses;
    let b = model.forward_train(&img.clone(), &t).unwrap().losses;
    assert_eq!(a, b);
    let p1 = model.forward_infer(&img).unwrap();
    let p2 = model.forward_infer(&img).unwrap();
    assert_eq!(p1.heatmap, p2.heatmap);
    assert_eq!(p1.coords, p2.coords);
}

#[test]
fn zero_head_decodes_to_origin() {
    let vocab = WordVocab::anatomy();
    let mut model = ClampModel::new(toy(64), &schema5(), &vocab).unwrap();
    let (w, b) = (model.predictor.final_layer.weight, model.predictor.final_layer.bias.unwrap());
    model.store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    model.store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let p = model.forward_infer(&image(4, 64)).unwrap();
    assert!(p.coords.iter().all(|c| *c == [0.0, 0.0]));
    assert!(p.confidence.iter().all(|&c| c == 0.0));
}

#[test]
fn width_mismatches_fail_at_construction() {
    let vocab = WordVocab::anatomy();
    let mut cfg = toy(256);
    cfg.text.embed_dim = 48;
    assert!(matches!(ClampModel::new(cfg, &schema5(), &vocab), Err(Error::Config(_))));
    let mut cfg = toy(256);
    cfg.refiner.heads = 5;
    assert!(ClampModel::new(cfg, &schema5(), &vocab).is_err());
    assert!(ClampModel::new(toy(250), &schema5(), &vocab).is_err());
    let mut cfg = toy(256);
    cfg.text.context_length = 8;
    assert!(ClampModel::new(cfg, &schema5(), &vocab).is_err());
    let mut cfg = toy(256);
    cfg.text.vocab_size = 3;
    assert!(ClampModel::new(cfg, &schema5(), &vocab).is_err());
}

#[test]
fn wrong_image_size_is_rejected() {
    let vocab = WordVocab::anatomy();
    let model = ClampModel::new(toy(64), &schema5(), &vocab).unwrap();
    assert!(model.forward_infer(&image(0, 32)).is_err());
}

#[test]
fn baseline_matches_clamp_when_score_channels_are_ignored() {
    let vocab = WordVocab::anatomy();
    let mut model = ClampModel::new(toy(64), &schema5(), &vocab).unwrap();
    model.weights.alpha1 = 0.0;
    model.weights.alpha2 = 0.0;
    // Zero the first-layer weights that read the score maps.
    let w = model.predictor.stages[0].0.weight;
    let row = model.store.value(w).len() / model.store.value(w).dim(0);
    model.store.value_mut(w).data_mut()[64 * row..].iter_mut().for_each(|v| *v = 0.0);
    let baseline = SimpleBaseline::from_clamp(&model);
    let img = image(5, 64);
    let t = target(&model, 64.0);
    let total = model.forward_train(&img, &t).unwrap().losses.total;
    assert_eq!(total.to_bits(), baseline.loss(&img, &t).unwrap().to_bits());
    let hm = baseline.forward(&img).unwrap();
    assert_eq!((hm.channels(), hm.height(), hm.width()), (5, 16, 16));
}

#[test]
fn baseline_shares_encoder_features() {
    let vocab = WordVocab::anatomy();
    let model = ClampModel::new(toy(64), &schema5(), &vocab).unwrap();
    let baseline = SimpleBaseline::from_clamp(&model);
    let img = image(6, 64);
    let feats = |store: &ParamStore, enc: &ImageEncoder| {
        let mut g = Graph::new(store);
        let x = g.constant(img.clone());
        let o = enc.forward(&mut g, x).origin;
        g.value(o).clone()
    };
    assert_eq!(feats(&model.store, &model.encoder), feats(&baseline.store, &baseline.encoder));
    let fresh = SimpleBaseline::new(EncoderConfig::TOY, 5, 16, (256, 256), 0).unwrap();
    assert_eq!(fresh.forward(&image(7, 256)).unwrap().height(), 64);
}

fn small_resnet() -> ModelConfig {
    let encoder = EncoderConfig::Resnet {
        layers: [1, 1, 1, 1],
        width: 8,
        heads: 4,
        embed_dim: 16,
        pretrained_grid: 7,
    };
    ModelConfig {
        encoder,
        text: crate::prompt::TextConfig::toy(WordVocab::anatomy().vocab_size(), 16),
        deconv_channels: 8,
        input_size: (64, 64),
        ..ModelConfig::default()
    }
}

fn small_vit() -> ModelConfig {
    let encoder = EncoderConfig::Vit {
        patch: 16,
        width: 16,
        layers: 1,
        heads: 2,
        embed_dim: 16,
        pretrained_grid: 14,
    };
    ModelConfig {
        encoder,
        ..small_resnet()
    }
}

#[test]
fn resnet_and_vit_variants_run() {
    let vocab = WordVocab::anatomy();
    for (cfg, grid) in [(small_resnet(), 2), (small_vit(), 4)] {
        let model = ClampModel::new(cfg.clone(), &schema5(), &vocab).unwrap();
        assert_eq!(model.predictor.in_channels, cfg.encoder.channels() + 5);
        let out = model.forward_train(&image(8, 64), &target(&model, 64.0)).unwrap();
        assert_eq!(out.scores.height(), grid);
        assert_eq!(out.heatmap.height(), 16);
        assert!(out.losses.total.is_finite());
    }
}

#[test]
fn clip_parameter_names() {
    let vocab = WordVocab::anatomy();
    let r = ClampModel::new(small_resnet(), &schema5(), &vocab).unwrap();
    for name in [
        "visual.conv1.weight",
        "visual.bn3.running_var",
        "visual.layer2.0.downsample.1.weight",
        "visual.attnpool.positional_embedding",
        "visual.attnpool.c_proj.bias",
        "token_embedding.weight",
        "transformer.resblocks.0.attn.q_proj.weight",
        "text_projection",
        "prompt.prefix",
        "prompt.gamma",
    ] {
        assert!(r.store.lookup(name).is_some(), "{name}");
    }
    let v = ClampModel::new(small_vit(), &schema5(), &vocab).unwrap();
    for name in ["visual.class_embedding", "visual.ln_post.weight", "visual.proj", "visual.transformer.resblocks.0.mlp.c_fc.weight"] {
        assert!(v.store.lookup(name).is_some(), "{name}");
    }
}

#[test]
fn sample_gradients_match_finite_differences() {
    let vocab = WordVocab::anatomy();
    let mut cfg = toy(64);
    cfg.learn_logit_scale = true;
    let mut model = ClampModel::new(cfg, &schema5(), &vocab).unwrap();
    // Make the refiner's gate and zero-initialized branches non-trivial.
    let gamma = model.refiner.gamma.unwrap();
    model.store.value_mut(gamma).data_mut()[0] = 0.5;
    let img = image(9, 64);
    let t = target(&model, 64.0);
    let loss = |m: &ClampModel| m.forward_train(&img, &t).unwrap().losses.total;
    let mut g = Graph::new(&model.store);
    let origin = model.origin_prompts(&mut g).unwrap();
    let x = g.constant(img.clone());
    let out = model.forward_sample(&mut g, x, origin, &t).unwrap();
    let grads = g.backward(out.total).params(&g);
    let probe = [
        "visual.stage2.weight",
        "visual.proj.weight",
        "prompt.prefix",
        "prompt.cross_attn.v_proj.weight",
        "prompt.gamma",
        "keypoint_head.deconv1.weight",
        "keypoint_head.final.bias",
        "adapt.logit_scale",
    ];
    let h = 1e-6;
    for name in probe {
        let id = model.store.lookup(name).unwrap();
        let analytic = &grads.iter().find(|(p, _)| *p == id).unwrap_or_else(|| panic!("no grad for {name}")).1;
        let idx = analytic.len() / 3;
        let orig = model.store.value(id).data()[idx];
        model.store.value_mut(id).data_mut()[idx] = orig + h;
        let up = loss(&model);
        model.store.value_mut(id).data_mut()[idx] = orig - h;
        let down = loss(&model);
        model.store.value_mut(id).data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.data()[idx];
        assert!((fd - a).abs() <= 1e-5 * (1.0 + a.abs().max(fd.abs())), "{name}: fd {fd} vs analytic {a}");
    }
    let text = model.store.lookup("transformer.resblocks.0.ln_1.weight").unwrap();
    assert!(grads.iter().all(|(p, _)| *p != text));
}
