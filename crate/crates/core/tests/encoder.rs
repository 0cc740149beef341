use std::sync::atomic::{AtomicUsize, Ordering};

use conceptrec::dataset::{Catalog, ConceptEntry, LearnerEntry};
use conceptrec::encoder::{
    self, render_concept_prompt, AnchorPrompt, EmbeddingStore, EncoderBackend, EncoderError,
    StubBackend,
};
use conceptrec::tensor::dot;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..14);
    (0..len)
        .map(|_| rng.random_range(b'a'..=b'z') as char)
        .collect()
}

#[test]
fn one_character_edits_move_the_stub_vector() {
    let stub = StubBackend::new(0, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let words: Vec<String> = (0..rng.random_range(1..4))
            .map(|_| random_word(&mut rng))
            .collect();
        let a = words.join(" ");
        let mut chars: Vec<char> = a.chars().collect();
        let i = rng.random_range(0..chars.len());
        let old = chars[i];
        while chars[i] == old {
            chars[i] = rng.random_range(b'a'..=b'z') as char;
        }
        let b: String = chars.into_iter().collect();
        let va = encoder::encode(&render_concept_prompt(&a), &stub).unwrap();
        let vb = encoder::encode(&render_concept_prompt(&b), &stub).unwrap();
        worst = worst.max(dot(&va, &vb));
    }
    assert!(worst < 0.99, "max cosine {worst}");
}

struct Counting {
    inner: StubBackend,
    calls: AtomicUsize,
}

impl EncoderBackend for Counting {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn raw(&self, prompt: &AnchorPrompt) -> Result<Vec<f64>, EncoderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.raw(prompt)
    }
}

fn catalog() -> Catalog {
    Catalog {
        concepts: ["fractions", "decimals", "ratios"]
            .iter()
            .enumerate()
            .map(|(id, t)| ConceptEntry {
                id,
                key: id.to_string(),
                text: t.to_string(),
            })
            .collect(),
        learners: (0..2)
            .map(|id| LearnerEntry {
                id,
                key: format!("u{id}"),
                profile: format!("student u{id} with 3 interactions"),
            })
            .collect(),
    }
}

#[test]
fn finished_catalog_reencodes_with_zero_calls() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("entities.jsonl");
    let backend = Counting {
        inner: StubBackend::new(3, 16),
        calls: AtomicUsize::new(0),
    };
    let cat = catalog();

    let mut store = EmbeddingStore::open(&path).unwrap();
    let first = encoder::encode_catalog(&cat, &backend, &mut store, 2).unwrap();
    assert_eq!(backend.calls.load(Ordering::SeqCst), 5);
    assert_eq!(first.concepts.shape(), &[3, 16]);
    assert_eq!(first.learners.shape(), &[2, 16]);

    let mut reopened = EmbeddingStore::open(&path).unwrap();
    let second = encoder::encode_catalog(&cat, &backend, &mut reopened, 2).unwrap();
    assert_eq!(backend.calls.load(Ordering::SeqCst), 5);
    assert_eq!(first, second);
}

/// Fails on one concept; the rest must survive in the store and be reused.
struct FailsOn(&'static str, StubBackend);

impl EncoderBackend for FailsOn {
    fn dim(&self) -> usize {
        self.1.dim()
    }

    fn raw(&self, prompt: &AnchorPrompt) -> Result<Vec<f64>, EncoderError> {
        if prompt.text.contains(self.0) {
            return Ok(vec![0.0; self.1.dim()]);
        }
        self.1.raw(prompt)
    }
}

#[test]
fn partial_failure_names_the_missing_rows_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("entities.jsonl");
    let cat = catalog();
    let mut store = EmbeddingStore::open(&path).unwrap();
    let err = encoder::encode_catalog(
        &cat,
        &FailsOn("decimals", StubBackend::new(3, 16)),
        &mut store,
        1,
    )
    .unwrap_err();
    match err {
        EncoderError::Incomplete { remaining, .. } => {
            assert_eq!(remaining, vec![(encoder::Kind::Concept, 1)])
        }
        other => panic!("unexpected {other}"),
    }
    let backend = Counting {
        inner: StubBackend::new(3, 16),
        calls: AtomicUsize::new(0),
    };
    let mut store = EmbeddingStore::open(&path).unwrap();
    encoder::encode_catalog(&cat, &backend, &mut store, 1).unwrap();
    assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
}

proptest! {
    #[test]
    fn stub_vectors_are_unit_norm(text in "\\PC{1,60}", seed in 0u64..1000, dim in 8usize..64) {
        let stub = StubBackend::new(seed, dim);
        let v = encoder::encode(&render_concept_prompt(&text), &stub).unwrap();
        prop_assert_eq!(v.len(), dim);
        prop_assert!((dot(&v, &v).sqrt() - 1.0).abs() < 1e-6);
        let again = encoder::encode(&render_concept_prompt(&text), &StubBackend::new(seed, dim)).unwrap();
        prop_assert_eq!(v, again);
    }

    #[test]
    fn concept_prompt_has_one_anchor(text in "[a-z \\n]{1,40}") {
        let p = render_concept_prompt(&text);
        prop_assert_eq!(p.text.matches("[C]").count(), 1);
        prop_assert!(p.text.contains(&text));
    }
}
