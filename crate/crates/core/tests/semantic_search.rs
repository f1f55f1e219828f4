use std::cell::Cell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use prss_core::detection::{detect_first_step, DetectionConfig, Signal, SignalKind};
use prss_core::diffusion::*;
use prss_core::guidance::{GuidanceConfig, Policy};
use prss_core::metrics::utility_score;
use prss_core::pipeline::{generate, Mitigation};
use prss_core::semantic_search::*;
use prss_core::toy::{make_memorization_testbed, MemorizationKind, TestbedConfig};
use prss_core::Error;

/// `eps(x, e) = e`, so the first-step magnitude of a candidate is its norm.
struct Echo(usize);

impl Denoiser for Echo {
    fn dim(&self) -> usize {
        self.0
    }
    fn embed_dim(&self) -> usize {
        self.0
    }
    fn predict_noise(&self, _x: &LatentState, e: &ConditionEmbedding) -> prss_core::Result<Vec<f64>> {
        Ok(e.vector().to_vec())
    }
}

struct Counting<'a> {
    inner: ListProvider,
    calls: &'a Cell<usize>,
}

impl AlternativeProvider for Counting<'_> {
    fn next_alternative(&mut self, index: usize) -> prss_core::Result<Option<ConditionEmbedding>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.next_alternative(index)
    }
}

fn candidates(norms: &[f64]) -> ListProvider {
    ListProvider::new(
        norms
            .iter()
            .map(|&n| ConditionEmbedding::user(vec![n, 0.0]).unwrap())
            .collect(),
    )
}

proptest! {
    #[test]
    fn search_invariants(
        norms in prop::collection::vec(prop::sample::select(vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.1]), 1..30),
        lambda in 0.05f64..1.2,
        n_s in 1usize..30,
    ) {
        let calls = Cell::new(0);
        let mut provider = Counting { inner: candidates(&norms), calls: &calls };
        let x = LatentState::new(vec![0.0, 0.0], 4).unwrap();
        let r = search(&mut provider, &Echo(2), &x, &ConditionEmbedding::null(2), lambda, n_s, &Signal::Plain).unwrap();
        let window = &norms[..n_s.min(norms.len())];
        prop_assert!(calls.get() <= n_s);
        prop_assert_eq!(r.chosen.role(), EmbeddingRole::Alternative);
        prop_assert_eq!(r.chosen_magnitude, norms[r.chosen_index]);
        for (k, &(i, m)) in r.examined.iter().enumerate() {
            prop_assert_eq!(i, k);
            prop_assert_eq!(m, norms[i]);
        }
        match window.iter().position(|&m| m < lambda) {
            Some(first) => {
                prop_assert!(r.early_stopped);
                prop_assert!(r.chosen_magnitude < lambda);
                prop_assert_eq!(r.chosen_index, first);
                prop_assert_eq!(r.examined.len(), first + 1);
            }
            None => {
                prop_assert!(!r.early_stopped);
                prop_assert_eq!(r.examined.len(), window.len());
                let min = window.iter().copied().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(r.chosen_magnitude, min);
                prop_assert_eq!(r.chosen_index, window.iter().position(|&m| m == min).unwrap());
            }
        }
    }
}

#[test]
fn first_candidate_below_threshold_stops_at_once() {
    let x = LatentState::new(vec![0.0, 0.0], 4).unwrap();
    let r = search(&mut candidates(&[0.2, 0.1]), &Echo(2), &x, &ConditionEmbedding::null(2), 0.5, 25, &Signal::Plain).unwrap();
    assert!(r.early_stopped);
    assert_eq!(r.examined.len(), 1);
    let huge = search(&mut candidates(&[9.0, 0.1]), &Echo(2), &x, &ConditionEmbedding::null(2), 1e9, 25, &Signal::Plain).unwrap();
    assert_eq!((huge.chosen_index, huge.examined.len()), (0, 1));
}

#[test]
fn all_above_threshold_falls_back_to_minimum() {
    let x = LatentState::new(vec![0.0, 0.0], 4).unwrap();
    let r = search(&mut candidates(&[0.9, 0.6, 0.8]), &Echo(2), &x, &ConditionEmbedding::null(2), 0.5, 25, &Signal::Plain).unwrap();
    assert!(!r.early_stopped);
    assert_eq!((r.chosen_index, r.chosen_magnitude), (1, 0.6));
}

#[test]
fn empty_provider_is_exhaustion() {
    let x = LatentState::new(vec![0.0, 0.0], 4).unwrap();
    let r = search(&mut candidates(&[]), &Echo(2), &x, &ConditionEmbedding::null(2), 0.5, 25, &Signal::Plain);
    assert_eq!(r.unwrap_err(), Error::ProviderExhausted);
    let z = search(&mut candidates(&[1.0]), &Echo(2), &x, &ConditionEmbedding::null(2), 0.5, 0, &Signal::Plain);
    assert!(z.is_err());
}

#[test]
fn stub_lists_family_mates_by_cosine() {
    let tb = make_memorization_testbed(&TestbedConfig::default(), 7).unwrap();
    let ds = &tb.dataset;
    for c in &ds.conditions {
        let alts = stub_alternatives(ds, c.id, 0).unwrap();
        assert_eq!(alts.len(), 3, "condition {}", c.id);
        assert!(alts.windows(2).all(|w| w[0].cosine >= w[1].cosine));
        for a in &alts {
            assert!(a.cosine >= STUB_MIN_COSINE);
            assert_eq!(ds.condition(a.condition_id).unwrap().family, c.family);
            assert_ne!(a.condition_id, c.id);
        }
        assert_eq!(alts, stub_alternatives(ds, c.id, 0).unwrap());
    }
}

#[test]
fn singleton_family_is_empty() {
    let cfg = TestbedConfig { family_size: 1, ..TestbedConfig::default() };
    let tb = make_memorization_testbed(&cfg, 7).unwrap();
    assert!(stub_alternatives(&tb.dataset, 0, 0).unwrap().is_empty());
    assert!(stub_provider(&tb.dataset, 0, 0).unwrap().is_empty());
}

#[test]
fn fallback_rarely_exceeds_the_user_magnitude_on_global_conditions() {
    let tb = make_memorization_testbed(&TestbedConfig::default(), 7).unwrap();
    let den = tb.denoiser().unwrap();
    let ds = &tb.dataset;
    let e_phi = ConditionEmbedding::null(ds.embed_dim);
    let (mut n, mut ok) = (0, 0);
    for seed in 0..8 {
        let x = initial_latent(ds.dim, den.schedule(), &mut ChaCha8Rng::seed_from_u64(seed));
        for c in ds.conditions.iter().filter(|c| c.kind == MemorizationKind::MemorizedGlobal) {
            let e = ConditionEmbedding::user(c.embedding.clone()).unwrap();
            let user = detect_first_step(&den, &x, &e, &e_phi, &DetectionConfig::plain(1.0).unwrap()).unwrap();
            let mut p = stub_provider(ds, c.id, seed).unwrap();
            let r = search(&mut p, &den, &x, &e_phi, 1e-12, 25, &Signal::Plain).unwrap();
            assert!(!r.early_stopped);
            n += 1;
            ok += usize::from(r.chosen_magnitude <= user.first_step_value);
        }
    }
    // mates that are memorized themselves can sit above the user prompt
    assert!(ok as f64 >= 0.9 * n as f64, "{ok}/{n}");
}

#[test]
fn alternatives_keep_more_utility_than_engineered_embeddings() {
    let tb = make_memorization_testbed(&TestbedConfig::default(), 7).unwrap();
    let den = tb.denoiser().unwrap();
    let ds = &tb.dataset;
    let schedule = den.schedule().clone();
    let e_phi = ConditionEmbedding::null(ds.embed_dim);
    let (mut ss_u, mut pe_u) = (Vec::new(), Vec::new());
    for seed in 0..4 {
        let x = initial_latent(ds.dim, &schedule, &mut ChaCha8Rng::seed_from_u64(seed));
        for c in ds.conditions.iter().filter(|c| c.kind != MemorizationKind::Normal) {
            let e = ConditionEmbedding::user(c.embedding.clone()).unwrap();
            let m = detect_first_step(&den, &x, &e, &e_phi, &DetectionConfig::plain(1.0).unwrap()).unwrap();
            let lambda = 0.5 * m.first_step_value;
            let det = DetectionConfig::new(lambda, 2.0 * lambda, SignalKind::Plain, None).unwrap();
            let ss = GuidanceConfig::new(Policy::Ss, det.clone());
            let mut pe = GuidanceConfig::new(Policy::Pe, det);
            pe.pe_params.step_size = 20.0;
            let mut prov = stub_provider(ds, c.id, seed).unwrap();
            let gs = generate(&den, &schedule, &e, &ss, Some(&mut prov), SamplerMode::Ddim, seed).unwrap();
            let gp = generate(&den, &schedule, &e, &pe, None, SamplerMode::Ddim, seed).unwrap();
            let (Mitigation::Alternative(_), Mitigation::Engineered(_)) = (&gs.mitigation, &gp.mitigation) else {
                panic!("both policies should mitigate a flagged prompt");
            };
            ss_u.push(utility_score(&gs.output.x0, c.id, ds).unwrap());
            pe_u.push(utility_score(&gp.output.x0, c.id, ds).unwrap());
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (a, b) = (median(&mut ss_u), median(&mut pe_u));
    assert!(a > b, "ss median utility {a} vs pe {b}");
}
