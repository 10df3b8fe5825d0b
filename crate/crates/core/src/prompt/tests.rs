use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::{normal_tensor, ParamGroup};

struct Fixture {
    store: ParamStore,
    encoder: TextEncoder,
    template: PromptTemplate,
}

fn fixture(schema: &KeypointSchema, k: usize, embed: usize) -> Fixture {
    let vocab = WordVocab::anatomy();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = TextConfig::toy(vocab.vocab_size(), embed);
    let encoder = TextEncoder::new(&mut Scope::new(&mut store, &mut rng, "text", ParamGroup::Frozen), cfg);
    let template = build_prompts(
        &mut Scope::new(&mut store, &mut rng, "prompt", ParamGroup::Head),
        schema,
        k,
        cfg.width,
        &vocab,
    )
    .unwrap();
    Fixture {
        store,
        encoder,
        template,
    }
}

fn single(name: &str) -> KeypointSchema {
    KeypointSchema::new("one", vec![name.to_string()], vec![], vec![], None).unwrap()
}

#[test]
fn seventeen_prompts_share_eight_prefix_slots() {
    let f = fixture(&KeypointSchema::ap10k(), 8, 24);
    assert_eq!(f.template.num_keypoints(), 17);
    assert_eq!(f.store.value(f.template.prefix).shape(), &[8, 32]);
    let e = encode_prompts(&f.store, &f.encoder, &f.template).unwrap();
    assert_eq!(e.values.shape(), &[17, 24]);
    assert_eq!(e.variant, PromptVariant::Origin);
    let again = encode_prompts(&f.store, &f.encoder, &f.template).unwrap();
    assert_eq!(e, again);
}

#[test]
fn minimal_prompt() {
    let f = fixture(&single("nose"), 1, 8);
    let e = encode_prompts(&f.store, &f.encoder, &f.template).unwrap();
    assert_eq!(e.values.shape(), &[1, 8]);
}

#[test]
fn shared_names_share_token_ids() {
    let a = fixture(&KeypointSchema::ap10k(), 8, 8).template;
    let b = fixture(&KeypointSchema::animal_pose(), 8, 8).template;
    let ia = a.keypoint_names.iter().position(|n| n == "nose").unwrap();
    let ib = b.keypoint_names.iter().position(|n| n == "nose").unwrap();
    assert_eq!(a.keypoint_token_ids[ia], b.keypoint_token_ids[ib]);
}

#[test]
fn untokenizable_name_is_reported() {
    let vocab = WordVocab::anatomy();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = build_prompts(
        &mut Scope::new(&mut store, &mut rng, "p", ParamGroup::Head),
        &single("left_antenna"),
        8,
        32,
        &vocab,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Untokenizable { ref name, .. } if name == "left_antenna"));
}

#[test]
fn prefix_width_mismatch_is_an_error() {
    let mut f = fixture(&single("nose"), 2, 8);
    f.store.set("prompt.prefix", Tensor::zeros(&[2, 31])).unwrap_err();
    let mut store = f.store.clone();
    let bad = store.add("bad_prefix", Tensor::zeros(&[2, 31]), ParamGroup::Head);
    let t = PromptTemplate { prefix: bad, ..f.template.clone() };
    assert!(encode_prompts(&store, &f.encoder, &t).is_err());
    f.template.k = 3;
    assert!(encode_prompts(&f.store, &f.encoder, &f.template).is_err());
}

#[test]
fn only_the_prefix_receives_gradients() {
    let f = fixture(&KeypointSchema::ap10k(), 4, 16);
    let mut g = Graph::new(&f.store);
    let e = f.encoder.encode(&mut g, &f.template).unwrap();
    let n = g.l2_normalize_rows(e);
    let loss = g.mean_rows(n);
    let loss = g.reshape(loss, &[16]);
    let grads = g.backward_with(loss, Tensor::full(&[16], 1.0)).params(&g);
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0, f.template.prefix);
}

#[test]
fn one_prefix_vector_moves_every_prompt() {
    let mut f = fixture(&KeypointSchema::ap10k(), 4, 16);
    let before = encode_prompts(&f.store, &f.encoder, &f.template).unwrap().values;
    f.store.value_mut(f.template.prefix).data_mut()[2 * 32 + 5] += 1e-3;
    let after = encode_prompts(&f.store, &f.encoder, &f.template).unwrap().values;
    for r in 0..17 {
        let moved = before.row(r).iter().zip(after.row(r)).any(|(a, b)| (a - b).abs() > 1e-9);
        assert!(moved, "row {r} did not change");
    }
}

#[test]
fn prefix_gradient_matches_finite_differences() {
    let mut f = fixture(&KeypointSchema::ap10k(), 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = normal_tensor(&mut rng, &[17, 8], 1.0);
    let objective = |store: &ParamStore| {
        let e = encode_prompts(store, &f.encoder, &f.template).unwrap().values;
        crate::math::dot(e.data(), weights.data())
    };
    let mut g = Graph::new(&f.store);
    let e = f.encoder.encode(&mut g, &f.template).unwrap();
    let analytic = g.backward_with(e, weights.clone()).params(&g)[0].1.clone();
    let h = 1e-5;
    for idx in [0, 7, 19, 33, 63] {
        let orig = f.store.value(f.template.prefix).data()[idx];
        f.store.value_mut(f.template.prefix).data_mut()[idx] = orig + h;
        let up = objective(&f.store);
        f.store.value_mut(f.template.prefix).data_mut()[idx] = orig - h;
        let down = objective(&f.store);
        f.store.value_mut(f.template.prefix).data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.data()[idx];
        assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "idx {idx}: fd {fd} vs {a}");
    }
}

#[test]
fn cache_recomputes_only_after_prefix_changes() {
    let mut f = fixture(&single("nose"), 2, 8);
    let mut cache = PromptCache::new();
    let a = cache.get(&f.store, &f.encoder, &f.template).unwrap().clone();
    cache.get(&f.store, &f.encoder, &f.template).unwrap();
    assert_eq!(cache.misses(), 1);
    f.store.value_mut(f.template.prefix).data_mut()[0] += 0.5;
    let b = cache.get(&f.store, &f.encoder, &f.template).unwrap().clone();
    assert_eq!(cache.misses(), 2);
    assert_ne!(a, b);
}

fn refiner(width: usize, heads: usize) -> (ParamStore, PromptRefiner) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RefinerConfig {
        heads,
        ..RefinerConfig::default()
    };
    let r = PromptRefiner::new(&mut Scope::new(&mut store, &mut rng, "r", ParamGroup::Head), width, cfg).unwrap();
    (store, r)
}

fn run_refiner(store: &ParamStore, r: &PromptRefiner, prompts: &Tensor, image: &Tensor) -> Tensor {
    let mut g = Graph::new(store);
    let (p, i) = (g.constant(prompts.clone()), g.constant(image.clone()));
    let out = r.forward(&mut g, p, i);
    g.value(out).clone()
}

#[test]
fn zero_gate_and_identity_block_pass_prompts_through() {
    let (mut store, r) = refiner(16, 8);
    store.set("r.gamma", Tensor::from_vec(&[1], vec![0.0])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = normal_tensor(&mut rng, &[5, 16], 1.0);
    let img = normal_tensor(&mut rng, &[9, 16], 1.0);
    assert_eq!(run_refiner(&store, &r, &p, &img), p);
}

#[test]
fn refiner_is_permutation_equivariant() {
    let (mut store, r) = refiner(16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Give the identity-initialized branches nonzero weights.
    let names: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains("out_proj.weight") || p.name.contains("c_proj.weight"))
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        store.set(&name, normal_tensor(&mut rng, &shape, 0.3)).unwrap();
    }
    store.set("r.gamma", Tensor::from_vec(&[1], vec![0.7])).unwrap();
    let p = normal_tensor(&mut rng, &[5, 16], 1.0);
    let img = normal_tensor(&mut rng, &[6, 16], 1.0);
    let perm = [3, 0, 4, 1, 2];
    let mut pp = Tensor::zeros(&[5, 16]);
    for (i, &src) in perm.iter().enumerate() {
        pp.row_mut(i).copy_from_slice(p.row(src));
    }
    let out = run_refiner(&store, &r, &p, &img);
    let out_p = run_refiner(&store, &r, &pp, &img);
    for (i, &src) in perm.iter().enumerate() {
        for (a, b) in out_p.row(i).iter().zip(out.row(src)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_head_cross_attention_by_hand() {
    // Two prompts, one image cell, width 2, one head, no prompt encoder.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = RefinerConfig {
        heads: 1,
        self_attention: false,
        ..RefinerConfig::default()
    };
    let r = PromptRefiner::new(&mut Scope::new(&mut store, &mut rng, "r", ParamGroup::Head), 2, cfg).unwrap();
    let set = |store: &mut ParamStore, n: &str, v: Vec<f64>| {
        let shape = store.value(store.lookup(n).unwrap()).shape().to_vec();
        store.set(n, Tensor::from_vec(&shape, v)).unwrap();
    };
    set(&mut store, "r.cross_attn.q_proj.weight", vec![1.0, 0.0, 0.0, 1.0]);
    set(&mut store, "r.cross_attn.k_proj.weight", vec![1.0, 0.0, 0.0, 1.0]);
    set(&mut store, "r.cross_attn.v_proj.weight", vec![2.0, 0.0, 1.0, 1.0]);
    set(&mut store, "r.cross_attn.v_proj.bias", vec![0.5, 0.0]);
    set(&mut store, "r.cross_attn.out_proj.weight", vec![0.0, 1.0, 1.0, 0.0]);
    set(&mut store, "r.cross_attn.out_proj.bias", vec![0.0, -1.0]);
    set(&mut store, "r.gamma", vec![0.5]);
    let p = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -3.0, 0.25]);
    let img = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]);
    // One key: attention weight 1. v = (2*1 + 0.5, 1 + 3) = (2.5, 4);
    // out = (4, 2.5 - 1) = (4, 1.5); result = p + 0.5 * out.
    let out = run_refiner(&store, &r, &p, &img);
    let want = [3.0, 2.75, -1.0, 1.0];
    for (a, b) in out.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
