use std::collections::BTreeSet;
use std::rc::Rc;

use latentkv::autograd::{grad_check, Tape};
use latentkv::model::{
    build_attention_mask, concat_cache, embed_tokens, forward, forward_tokens, AttentionMask, AugmentationPlan,
    BoundModel, CacheOrigin, ModelCache, ModelConfig, ModelParams, PassKind, Role,
};
use latentkv::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig::new(2, 16, 2, 11, 64)
}

fn params<T: latentkv::Scalar>(seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(&tiny_config(), Role::Base, &mut rng).unwrap()
}

#[test]
fn single_token_shapes() {
    let p = params::<f32>(0);
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let out = forward_tokens(&mut tape, &m, Role::Base, &[3], &ModelCache::empty()).unwrap();
    assert_eq!(tape.shape(out.logits.unwrap()), &[1, 11]);
    assert_eq!(out.new_entries.layers.len(), 2);
    assert!(out.new_entries.layers.iter().all(|l| l.position_ids.len() == 1));
    assert_eq!(tape.shape(out.hidden_last), &[1, 16]);
}

#[test]
fn repeated_calls_are_bit_identical() {
    let p = params::<f32>(1);
    let run = || {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape, false).unwrap();
        let out = forward_tokens(&mut tape, &m, Role::Base, &[1, 2, 3, 4], &ModelCache::empty()).unwrap();
        tape.value(out.logits.unwrap()).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let p = params::<f32>(2);
    let tokens = [5usize, 1, 9, 0, 3, 3, 7, 2];
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let full = forward_tokens(&mut tape, &m, Role::Base, &tokens, &ModelCache::empty()).unwrap();
    let full = tape.value(full.logits.unwrap()).clone();
    let mut cache = ModelCache::empty();
    // first a chunk of three, then one token at a time
    let first = forward_tokens(&mut tape, &m, Role::Base, &tokens[..3], &cache).unwrap();
    cache = concat_cache(&mut tape, &cache, &first.new_entries).unwrap();
    let mut rows: Vec<f32> = tape.value(first.logits.unwrap()).data().to_vec();
    for &tok in &tokens[3..] {
        let out = forward_tokens(&mut tape, &m, Role::Base, &[tok], &cache).unwrap();
        cache = concat_cache(&mut tape, &cache, &out.new_entries).unwrap();
        rows.extend_from_slice(tape.value(out.logits.unwrap()).data());
    }
    let inc = Tensor::from_vec(&[tokens.len(), 11], rows).unwrap();
    assert!(full.max_abs_diff(&inc) < 1e-4, "diff {}", full.max_abs_diff(&inc));
    assert_eq!(cache.len(), tokens.len());
    assert_eq!(cache.position_ids(), (0..tokens.len()).collect::<Vec<_>>().as_slice());
}

#[test]
fn forward_contract_errors() {
    let p = params::<f32>(3);
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let x = embed_tokens(&mut tape, &m, &[1, 2]).unwrap();
    let bad_mask = Rc::new(AttentionMask::causal(3, 0));
    let err = forward(
        &mut tape,
        &m,
        Role::Base,
        x,
        &ModelCache::empty(),
        &bad_mask,
        &[0, 1],
        true,
    );
    assert!(matches!(err, Err(Error::Contract(_))));
    let mask = Rc::new(AttentionMask::causal(2, 0));
    let err = forward(
        &mut tape,
        &m,
        Role::Base,
        x,
        &ModelCache::empty(),
        &mask,
        &[0, 64],
        true,
    );
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn embedding_rows() {
    let p = params::<f32>(4);
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let e = embed_tokens(&mut tape, &m, &[]).unwrap();
    assert_eq!(tape.shape(e), &[0, 16]);
    let e = embed_tokens(&mut tape, &m, &[7, 2, 7]).unwrap();
    let v = tape.value(e);
    assert_eq!(v.row(0), v.row(2));
    assert_eq!(v.row(1), p.tok_emb.row(2));
    assert!(matches!(embed_tokens(&mut tape, &m, &[11]), Err(Error::Contract(_))));
}

#[test]
fn concat_cache_identity_and_additivity() {
    let p = params::<f32>(5);
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let a = forward_tokens(&mut tape, &m, Role::Base, &[1, 2, 3, 4, 5], &ModelCache::empty()).unwrap();
    let same = concat_cache(&mut tape, &a.new_entries, &ModelCache::empty()).unwrap();
    assert_eq!(same, a.new_entries);
    let b = forward_tokens(&mut tape, &m, Role::Coprocessor, &[6, 7, 8], &ModelCache::empty()).unwrap();
    let both = concat_cache(&mut tape, &a.new_entries, &b.new_entries).unwrap();
    assert_eq!(both.origin, CacheOrigin::Concatenated);
    for l in &both.layers {
        assert_eq!(l.position_ids.len(), 8);
        assert_eq!(tape.rows(l.keys), 8);
        assert_eq!(tape.rows(l.values), 8);
    }
    // one layer only -> layer count mismatch
    let truncated = ModelCache {
        layers: b.new_entries.layers[..1].to_vec(),
        origin: CacheOrigin::Coprocessor,
    };
    assert!(matches!(
        concat_cache(&mut tape, &a.new_entries, &truncated),
        Err(Error::Contract(_))
    ));
}

#[test]
fn empty_extra_cache_changes_no_logit() {
    let p = params::<f32>(6);
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let prefix = forward_tokens(&mut tape, &m, Role::Base, &[1, 2, 3], &ModelCache::empty()).unwrap();
    let plain = forward_tokens(&mut tape, &m, Role::Base, &[4, 5], &prefix.new_entries).unwrap();
    let joined = concat_cache(&mut tape, &prefix.new_entries, &ModelCache::empty()).unwrap();
    let again = forward_tokens(&mut tape, &m, Role::Base, &[4, 5], &joined).unwrap();
    assert_eq!(tape.value(plain.logits.unwrap()), tape.value(again.logits.unwrap()));
}

#[test]
fn masked_out_extra_rows_are_invisible() {
    let p = params::<f32>(7);
    let mut tape = Tape::new();
    let m = p.bind(&mut tape, false).unwrap();
    let prefix = forward_tokens(&mut tape, &m, Role::Base, &[1, 2, 3, 4, 5], &ModelCache::empty()).unwrap();
    let extra = forward_tokens(&mut tape, &m, Role::Base, &[9, 9, 9], &ModelCache::empty()).unwrap();
    let joined = concat_cache(&mut tape, &prefix.new_entries, &extra.new_entries).unwrap();
    let x = embed_tokens(&mut tape, &m, &[6, 7]).unwrap();
    let mask = AttentionMask::from_fn(2, 10, |r, c| c < 5 || c >= 8 && c - 8 <= r).unwrap();
    let with_extra = forward(&mut tape, &m, Role::Base, x, &joined, &Rc::new(mask), &[5, 6], true).unwrap();
    let plain = forward_tokens(&mut tape, &m, Role::Base, &[6, 7], &prefix.new_entries).unwrap();
    let d = tape
        .value(with_extra.logits.unwrap())
        .max_abs_diff(tape.value(plain.logits.unwrap()));
    assert!(d < 1e-6, "diff {}", d);
}

#[test]
fn block_loss_gradients() {
    let cfg = ModelConfig::new(1, 8, 2, 7, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // a wider init keeps every gradient well above finite-difference noise
    let mut p = ModelParams::<f64>::init(&cfg, Role::Base, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = *v * 5.0 + if i % 3 == 0 { 0.1 } else { -0.05 };
        }
    }
    let leaves: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
    let tokens = [1usize, 4, 2, 6, 0];
    let targets = [4usize, 2, 6, 0, 3];
    let err = grad_check(
        |tape, vars| {
            let bound = BoundModel::from_vars(&cfg, vars)?;
            let out = forward_tokens(tape, &bound, Role::Base, &tokens, &ModelCache::empty())?;
            tape.cross_entropy(out.logits.unwrap(), &targets, &[true; 5])
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {}", err);
}

/// Independent statement of the mask rules keyed by absolute positions.
fn reference_keys(plan: &AugmentationPlan, pass: PassKind) -> Vec<BTreeSet<usize>> {
    let s = plan.seq_len();
    let (m, nl, na) = (plan.n_sites(), plan.n_latents(), plan.n_ahead());
    let lat_col = |site: usize, slot: usize| s + site * nl + slot;
    let ahead_col = |site: usize, j: usize| s + m * nl + site * na + j;
    let mut latent_rows = Vec::new();
    let mut ahead_rows = Vec::new();
    for (site, &t) in plan.sites().iter().enumerate() {
        for slot in 0..nl {
            let mut keys: BTreeSet<usize> = (0..t).collect();
            keys.extend((0..=slot).map(|k| lat_col(site, k)));
            latent_rows.push(keys);
        }
    }
    for (site, &t) in plan.sites().iter().enumerate() {
        for j in 0..na {
            let mut keys: BTreeSet<usize> = (0..t).collect();
            keys.extend((0..nl).map(|k| lat_col(site, k)));
            keys.extend((0..=j).map(|k| ahead_col(site, k)));
            ahead_rows.push(keys);
        }
    }
    match pass {
        PassKind::BasePrefix => (0..s).map(|q| (0..=q).collect()).collect(),
        PassKind::Coprocessor => latent_rows,
        PassKind::Decode => latent_rows.into_iter().chain(ahead_rows).collect(),
        PassKind::DecodeCachedLatents => ahead_rows,
    }
}

fn random_plan(rng: &mut ChaCha8Rng) -> AugmentationPlan {
    loop {
        let s = rng.random_range(2..30);
        let na = rng.random_range(1..4);
        let nl = rng.random_range(0..4);
        let mut sites = Vec::new();
        let mut t = rng.random_range(1..=s);
        while t + na <= s {
            sites.push(t);
            t += na + rng.random_range(0..4);
        }
        if let Ok(p) = AugmentationPlan::new(s, sites, nl, na) {
            return p;
        }
    }
}

#[test]
fn masks_match_rule_enumeration() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = random_plan(&mut rng);
        for pass in [
            PassKind::BasePrefix,
            PassKind::Coprocessor,
            PassKind::Decode,
            PassKind::DecodeCachedLatents,
        ] {
            let mask = build_attention_mask(&plan, pass).unwrap();
            let want = reference_keys(&plan, pass);
            assert_eq!(mask.rows(), want.len(), "{:?} {:?}", plan, pass);
            for (r, keys) in want.iter().enumerate() {
                let got: BTreeSet<usize> = mask.allowed(r).iter().map(|&c| c as usize).collect();
                assert_eq!(&got, keys, "seed {} {:?} row {}", seed, pass, r);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbing_one_site_never_leaks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = loop {
            let p = random_plan(&mut rng);
            if p.n_sites() >= 2 && p.n_latents() > 0 && p.seq_len() + p.total_latents() + p.total_ahead() < 64 {
                break p;
            }
        };
        let p = params::<f32>(seed);
        let tokens: Vec<usize> = (0..plan.seq_len()).map(|_| rng.random_range(0..11)).collect();
        let victim = rng.random_range(0..plan.n_sites());
        let run = |perturb: bool| {
            let mut tape = Tape::new();
            let m = p.bind(&mut tape, false).unwrap();
            let prefix = forward_tokens(&mut tape, &m, Role::Base, &tokens, &ModelCache::empty()).unwrap();
            let mut z = Tensor::<f32>::zeros(&[plan.total_latents(), 16]);
            if perturb {
                for slot in 0..plan.n_latents() {
                    for v in z.row_mut(victim * plan.n_latents() + slot) {
                        *v = 3.0;
                    }
                }
            }
            let ahead: Vec<usize> = plan.ahead_tokens(&tokens).unwrap().concat();
            let za = tape.constant(z).unwrap();
            let ea = embed_tokens(&mut tape, &m, &ahead).unwrap();
            let x = tape.concat_rows(&[za, ea]).unwrap();
            let mut pos = plan.latent_positions();
            pos.extend(plan.ahead_positions());
            let mask = Rc::new(build_attention_mask(&plan, PassKind::Decode).unwrap());
            let out = forward(&mut tape, &m, Role::Base, x, &prefix.new_entries, &mask, &pos, true).unwrap();
            tape.value(out.logits.unwrap()).clone()
        };
        let (a, b) = (run(false), run(true));
        let base = plan.total_latents();
        for site in 0..plan.n_sites() {
            for j in 0..plan.n_ahead() {
                let r = base + site * plan.n_ahead() + j;
                let d = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
                if site == victim {
                    prop_assert!(d > 0.0);
                } else {
                    prop_assert!(d <= 1e-6, "site {} leaked {}", site, d);
                }
            }
        }
    }
}
