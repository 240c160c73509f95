#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use precedent::corpus::{Corpus, Document, RhetoricalRole};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_QUERIES: usize = 50;
pub const RELEVANT_PER_QUERY: usize = 5;
pub const N_DISTRACTORS: usize = 200;
pub const MARKERS_PER_QUERY: usize = 3;
const CLUSTER_WORDS: usize = 12;
const FILLER_WORDS: usize = 400;

/// Synthetic corpus with known relevance: every query document shares three
/// rare marker tokens and a topic vocabulary with exactly five relevant
/// documents, and cites them.
pub struct Planted {
    pub corpus: Corpus,
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..FILLER_WORDS))).collect()
}

fn topic(rng: &mut ChaCha8Rng, cluster: usize, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| format!("topic{cluster}x{}", rng.gen_range(0..CLUSTER_WORDS)))
        .collect()
}

fn sentence(mut words: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    words.shuffle(rng);
    let mut s = words.join(" ");
    s.push('.');
    s
}

fn markers(q: usize) -> Vec<String> {
    (0..MARKERS_PER_QUERY).map(|m| format!("marker{q}m{m}")).collect()
}

pub fn planted_corpus(seed: u64) -> Planted {
    use RhetoricalRole::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut relevant = BTreeMap::new();

    for q in 0..N_QUERIES {
        let qid = format!("query{q:02}");
        let rel_ids: Vec<String> = (0..RELEVANT_PER_QUERY).map(|r| format!("prior{q:02}r{r}")).collect();
        for rid in &rel_ids {
            let mut body = filler(&mut rng, 30);
            body.extend(topic(&mut rng, q, 25));
            body.extend(markers(q));
            let mut more = filler(&mut rng, 20);
            more.extend(topic(&mut rng, q, 10));
            docs.push(
                Document::new(rid.clone(), "")
                    .with_sentences([(sentence(body, &mut rng), Facts), (sentence(more, &mut rng), Reasoning)]),
            );
        }

        let roles = [Facts, Issue, Argument, Reasoning, Decision, Other];
        let sentences: Vec<(String, RhetoricalRole)> = roles
            .iter()
            .map(|&role| {
                let mut words = filler(&mut rng, 12);
                words.extend(topic(&mut rng, q, 6));
                words.extend(markers(q));
                (sentence(words, &mut rng), role)
            })
            .collect();
        docs.push(
            Document::new(qid.clone(), "")
                .with_sentences(sentences)
                .with_citations(rel_ids.iter().cloned()),
        );
        relevant.insert(qid, rel_ids.into_iter().collect());
    }

    for d in 0..N_DISTRACTORS {
        let mut words = filler(&mut rng, 40);
        for _ in 0..2 {
            let c = rng.gen_range(0..N_QUERIES);
            words.extend(topic(&mut rng, c, 8));
        }
        docs.push(Document::new(format!("other{d:03}"), "").with_sentences([(sentence(words, &mut rng), Facts)]));
    }

    docs.shuffle(&mut rng);
    Planted {
        corpus: Corpus::new(docs).expect("generated ids are unique"),
        relevant,
    }
}

/// A document whose sentence `i` is made of tokens tagged `s{i}` and carries
/// a random role.
pub fn random_annotated(rng: &mut ChaCha8Rng, id: usize) -> Document {
    let n = rng.gen_range(1..25);
    let sentences: Vec<(String, RhetoricalRole)> = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..6);
            let text = (0..len)
                .map(|_| format!("s{i}t{}", rng.gen_range(0..4)))
                .collect::<Vec<_>>()
                .join(" ");
            let role = RhetoricalRole::ALL[rng.gen_range(0..RhetoricalRole::ALL.len())];
            (text, role)
        })
        .collect();
    Document::new(format!("doc{id}"), "").with_sentences(sentences)
}
