//! Acceptance gate. Each criterion runs against an independent oracle and
//! prints one PASS/FAIL line; the test fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use precedent::corpus::{save_corpus, Corpus, Document};
use precedent::eval::{
    recall_at_k, reciprocal_rank, sweep_and_report, Qrels, RunOutput,
    REPORT_COLUMNS,
};
use precedent::fusion::{rrf_fuse, RankedList, RrfConfig, Source};
use precedent::lexical::{bm25_score, build_index, score_candidates, search_full, tokenize, Bm25Config};
use precedent::pipeline::{
    build_indexes, run_experiment_with, ExperimentConfig, Method, Models, Retriever, RUNS_DIR,
};
use precedent::segmenter::{build_role_query, Annotator, RoleConfig, RolePreset};
use precedent::vector::{build_flat, build_ivf, Embedding, IvfParams, SearchParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn report_line(line: &str) {
    // Written straight to stderr so the line survives test output capture.
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run_criterion(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(_), Some(limit)) if elapsed > limit => {
            Err(format!("took {elapsed:.2?}, limit {limit:?}"))
        }
        (o, _) => o,
    };
    let passed = outcome.is_ok();
    let detail = match outcome {
        Ok(d) | Err(d) => d,
    };
    report_line(&format!(
        "{} {name} ({elapsed:.2?}){}{}",
        if passed { "PASS" } else { "FAIL" },
        if detail.is_empty() { "" } else { ": " },
        detail
    ));
    passed
}

// ---------------------------------------------------------------------------
// Metric oracle: exact rational arithmetic over the raw definitions.

type Q = Ratio<i128>;

struct OracleRow {
    p: Q,
    r: Q,
    f1: Q,
}

fn oracle_query(ranking: &[String], qid: &str, relevant: &BTreeSet<String>, k: usize) -> OracleRow {
    let filtered: Vec<&String> = ranking.iter().filter(|d| *d != qid).collect();
    let mut hits = 0i128;
    for d in filtered.iter().take(k) {
        if relevant.contains(*d) {
            hits += 1;
        }
    }
    let p = Q::new(hits, k as i128);
    let r = Q::new(hits, relevant.len() as i128);
    let f1 = if p + r == Q::from_integer(0) {
        Q::from_integer(0)
    } else {
        Q::from_integer(2) * p * r / (p + r)
    };
    OracleRow { p, r, f1 }
}

fn oracle_ap_rr(ranking: &[String], qid: &str, relevant: &BTreeSet<String>) -> (Q, Q) {
    let filtered: Vec<&String> = ranking.iter().filter(|d| *d != qid).collect();
    let mut ap = Q::from_integer(0);
    let mut rr = Q::from_integer(0);
    for (i, d) in filtered.iter().enumerate() {
        if relevant.contains(*d) {
            let rank = i as i128 + 1;
            let above = filtered[..=i].iter().filter(|x| relevant.contains(**x)).count() as i128;
            ap += Q::new(above, rank);
            if rr == Q::from_integer(0) {
                rr = Q::new(1, rank);
            }
        }
    }
    (ap / Q::from_integer(relevant.len() as i128), rr)
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cells = 0usize;
    for instance in 0..200 {
        let n_docs = rng.gen_range(1..=20);
        let docs: Vec<String> = (0..n_docs).map(|i| format!("d{i}")).collect();
        let n_queries = rng.gen_range(1..=5.min(n_docs));
        let queries: Vec<String> = docs.choose_multiple(&mut rng, n_queries).cloned().collect();

        let mut qrels = Qrels::new();
        let mut truth = BTreeMap::new();
        let mut lists = Vec::new();
        for q in &queries {
            let rel: BTreeSet<String> = docs
                .iter()
                .filter(|d| *d != q && rng.gen_bool(0.3))
                .cloned()
                .collect();
            qrels.add_query(q.clone());
            for d in &rel {
                qrels.add(q.clone(), d.clone());
            }
            let mut ranking = docs.clone();
            ranking.shuffle(&mut rng);
            ranking.truncate(rng.gen_range(0..=n_docs));
            let n = ranking.len();
            lists.push(RankedList::from_ordered(
                q.clone(),
                Source::Rrf,
                ranking.iter().enumerate().map(|(i, d)| (d.clone(), (n - i) as f64)).collect(),
            ));
            truth.insert(q.clone(), (ranking, rel));
        }

        let runs = [RunOutput {
            config: "c".into(),
            method: "m".into(),
            lists,
        }];
        let report = sweep_and_report(&runs, &qrels, 1..=20).map_err(|e| e.to_string())?;
        let scored: Vec<_> = truth.iter().filter(|(_, (_, rel))| !rel.is_empty()).collect();
        let n = scored.len() as i128;
        let mean = |xs: Vec<Q>| {
            if n == 0 {
                Q::from_integer(0)
            } else {
                xs.into_iter().fold(Q::from_integer(0), |a, b| a + b) / Q::from_integer(n)
            }
        };
        let (map, mrr) = {
            let pairs: Vec<(Q, Q)> = scored.iter().map(|(q, (rk, rel))| oracle_ap_rr(rk, q, rel)).collect();
            (mean(pairs.iter().map(|p| p.0).collect()), mean(pairs.iter().map(|p| p.1).collect()))
        };
        for row in &report.rows {
            let per: Vec<OracleRow> = scored.iter().map(|(q, (rk, rel))| oracle_query(rk, q, rel, row.k)).collect();
            let expected = [
                ("precision", row.precision, mean(per.iter().map(|o| o.p).collect())),
                ("recall", row.recall, mean(per.iter().map(|o| o.r).collect())),
                ("f1", row.f1, mean(per.iter().map(|o| o.f1).collect())),
                ("map", row.map, map),
                ("mrr", row.mrr, mrr),
            ];
            for (name, got, want) in expected {
                let want = to_f64(want);
                ensure!(
                    (got - want).abs() <= 1e-12,
                    "instance {instance} k={} {name}: engine {got} oracle {want}",
                    row.k
                );
                cells += 1;
            }
        }
        ensure!(report.rows.len() == 20, "instance {instance}: {} rows", report.rows.len());
    }
    Ok(format!("{cells} metric cells within 1e-12"))
}

// ---------------------------------------------------------------------------

fn rrf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = RrfConfig::default();
    for instance in 0..200 {
        let pool: Vec<String> = (0..rng.gen_range(1..40)).map(|i| format!("doc{i}")).collect();
        let n_lists = rng.gen_range(1..=5);
        let lists: Vec<RankedList> = (0..n_lists)
            .map(|_| {
                let mut ids = pool.clone();
                ids.shuffle(&mut rng);
                ids.truncate(rng.gen_range(0..=pool.len()));
                let scored = ids.into_iter().map(|d| (d, rng.gen_range(-5.0..5.0))).collect();
                RankedList::from_ordered("q", Source::Vector, scored)
            })
            .collect();

        let mut sums: BTreeMap<&str, Q> = BTreeMap::new();
        for list in &lists {
            for (i, e) in list.entries.iter().enumerate() {
                *sums.entry(e.doc_id.as_str()).or_insert(Q::from_integer(0)) += Q::new(1, i as i128 + 1 + 60);
            }
        }
        let mut expected: Vec<(&str, Q)> = sums.into_iter().collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let fused = rrf_fuse(&lists, &cfg).map_err(|e| e.to_string())?;
        let got = fused.doc_ids();
        let want: Vec<&str> = expected.iter().map(|e| e.0).collect();
        ensure!(got == want, "instance {instance}: order {got:?} != oracle {want:?}");
        for (e, (_, s)) in fused.entries.iter().zip(&expected) {
            ensure!((e.score - to_f64(*s)).abs() <= 1e-12, "instance {instance}: score {}", e.score);
        }

        let mut permuted = lists.clone();
        permuted.shuffle(&mut rng);
        ensure!(rrf_fuse(&permuted, &cfg).map_err(|e| e.to_string())? == fused, "instance {instance}: permutation changed output");

        let single = rrf_fuse(&lists[..1], &cfg).map_err(|e| e.to_string())?;
        ensure!(single.doc_ids() == lists[0].doc_ids(), "instance {instance}: single-list order changed");
    }
    Ok("200 instances match exact rational fusion".into())
}

// ---------------------------------------------------------------------------

fn hand_bm25(docs: &[Vec<&str>], query: &[&str], d: usize) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|x| x.len()).sum::<usize>() as f64 / n;
    let (k1, b) = (1.2, 0.75);
    let mut distinct: Vec<&str> = query.to_vec();
    distinct.sort();
    distinct.dedup();
    distinct
        .iter()
        .map(|t| {
            let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
            let tf = docs[d].iter().filter(|x| *x == t).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let dl = docs[d].len() as f64;
            idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
        })
        .sum()
}

fn bm25_reference() -> Outcome {
    let cfg = Bm25Config::default();
    let texts = ["a b a", "b c", "c c c"];
    let corpus = Corpus::new(
        texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{}", i + 1), *t)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let index = build_index(&corpus, &cfg);
    let docs: Vec<Vec<&str>> = texts.iter().map(|t| t.split(' ').collect()).collect();
    let queries: [&[&str]; 6] = [&["a"], &["b"], &["c"], &["a", "b"], &["a", "c", "c"], &["z", "b"]];
    for q in queries {
        let toks: Vec<String> = q.iter().map(|s| s.to_string()).collect();
        for d in 0..3 {
            let got = bm25_score(&toks, &format!("d{}", d + 1), &index, &cfg).map_err(|e| e.to_string())?;
            let want = hand_bm25(&docs, q, d);
            ensure!((got - want).abs() <= 1e-9, "query {q:?} d{}: {got} vs {want}", d + 1);
        }
    }
    let worked = bm25_score(&["a".to_string()], "d1", &index, &cfg).map_err(|e| e.to_string())?;
    ensure!((worked - 1.3028).abs() < 5e-5, "score(d1 | a) = {worked}");

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let vocab = ["law", "court", "appeal", "tax", "land", "notice", "bail", "writ"];
    let random: Vec<Document> = (0..10)
        .map(|i| {
            let n = rng.gen_range(1..12);
            let text: Vec<&str> = (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
            Document::new(format!("r{i}"), text.join(" "))
        })
        .collect();
    let corpus = Corpus::new(random).map_err(|e| e.to_string())?;
    let index = build_index(&corpus, &cfg);
    let ids: Vec<String> = corpus.iter().map(|d| d.doc_id.clone()).collect();
    let mut checked = 0;
    for query in ["court appeal", "tax tax notice", "writ", "law land bail court"] {
        let toks = tokenize(query, &cfg);
        let full = search_full("q", &toks, &index, &cfg, usize::MAX);
        for mask in 0u32..(1 << ids.len()) {
            let subset: BTreeSet<String> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, d)| d.clone())
                .collect();
            let restricted = score_candidates("q", &toks, &subset, &index, &cfg).map_err(|e| e.to_string())?;
            let expected: Vec<(&str, f64)> = full
                .entries
                .iter()
                .filter(|e| subset.contains(&e.doc_id))
                .map(|e| (e.doc_id.as_str(), e.score))
                .collect();
            let got: Vec<(&str, f64)> = restricted.entries.iter().map(|e| (e.doc_id.as_str(), e.score)).collect();
            ensure!(got == expected, "query {query:?} subset {mask:#b}: {got:?} vs {expected:?}");
            checked += 1;
        }
    }
    Ok(format!("worked corpus within 1e-9; {checked} restricted rankings consistent"))
}

// ---------------------------------------------------------------------------

fn vector_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dim = 32;
    let mut random_vec = || Embedding((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let data: Vec<(String, Embedding)> = (0..1000).map(|i| (format!("v{i:04}"), random_vec())).collect();
    let queries: Vec<Embedding> = (0..100).map(|_| random_vec()).collect();
    let lookup: HashMap<&str, &Embedding> = data.iter().map(|(id, v)| (id.as_str(), v)).collect();

    let flat = build_flat(data.clone()).map_err(|e| e.to_string())?;
    let ivf = build_ivf(data.clone(), &IvfParams::for_size(data.len(), 7)).map_err(|e| e.to_string())?;
    let nlist = ivf.nlist();
    let top_k = 10;

    let mut prev_recall = -1.0;
    let mut recalls = Vec::new();
    for nprobe in 1..=nlist {
        let mut hits = 0usize;
        for (qi, q) in queries.iter().enumerate() {
            let qid = format!("q{qi}");
            let exact = flat.search(&qid, q, top_k).map_err(|e| e.to_string())?;
            let approx = ivf.search(&qid, q, &SearchParams { nprobe, top_k }).map_err(|e| e.to_string())?;
            if nprobe == nlist {
                ensure!(approx.entries == exact.entries, "query {qi}: nprobe=nlist differs from flat");
            }
            for e in &approx.entries {
                let v = lookup[e.doc_id.as_str()];
                let direct: f64 = q.0.iter().zip(&v.0).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt();
                let got = -e.score;
                ensure!((got - direct).abs() <= 1e-6 * direct.max(f64::MIN_POSITIVE), "query {qi} {}: {got} vs {direct}", e.doc_id);
            }
            let truth: BTreeSet<&str> = exact.doc_ids().into_iter().collect();
            hits += approx.doc_ids().iter().filter(|d| truth.contains(*d)).count();
        }
        let recall = hits as f64 / (queries.len() * top_k) as f64;
        ensure!(recall >= prev_recall, "recall fell from {prev_recall} to {recall} at nprobe={nprobe}");
        prev_recall = recall;
        recalls.push(recall);
    }
    ensure!((prev_recall - 1.0).abs() < 1e-15, "recall at nprobe=nlist is {prev_recall}");
    Ok(format!(
        "nlist={nlist}; recall@10 {:.3} at nprobe=1 rising to 1.000",
        recalls[0]
    ))
}

// ---------------------------------------------------------------------------

fn planted_config(dir: &std::path::Path, out: &str) -> ExperimentConfig {
    ExperimentConfig {
        corpus: dir.join("planted.jsonl"),
        output_dir: dir.join(out),
        seed: 5,
        ..ExperimentConfig::default()
    }
}

fn containment_and_determinism() -> Outcome {
    let planted = common::planted_corpus(21);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_corpus(&planted.corpus, dir.path().join("planted.jsonl")).map_err(|e| e.to_string())?;
    let models = Models::stub(precedent::vector::DEFAULT_DIMENSION, Annotator::File);

    // Containment, with a candidate set smaller than the corpus so the
    // restriction is visible.
    let mut cfg = planted_config(dir.path(), "a");
    cfg.k_vec = 60;
    let (indexes, _) = build_indexes(&planted.corpus, &cfg, models.embedder.as_ref(), &[Method::TraceFull])
        .map_err(|e| e.to_string())?;
    let retriever = Retriever::new(&planted.corpus, &indexes, &models, &cfg);
    let mut checked = 0;
    for preset in RolePreset::ALL {
        let role = RoleConfig::preset(preset);
        for doc in planted.corpus.query_documents() {
            let q = build_role_query(doc, &role).map_err(|e| e.to_string())?;
            let stages = retriever.retrieve_stages(&q, None, Method::TraceFull).map_err(|e| e.to_string())?;
            let vector = stages.vector.ok_or("no vector stage")?;
            let cands: BTreeSet<&str> = vector.doc_ids().into_iter().collect();
            for d in stages.final_list.doc_ids() {
                ensure!(cands.contains(d), "{} / {}: {d} not among vector candidates", preset.name(), q.query_id);
            }
            ensure!(!stages.final_list.contains(&q.query_id), "self retrieved for {}", q.query_id);
            stages.final_list.validate().map_err(|e| e.to_string())?;
            checked += 1;
        }
    }

    let first = run_experiment_with(&planted_config(dir.path(), "run1"), &models).map_err(|e| e.to_string())?;
    let second = run_experiment_with(&planted_config(dir.path(), "run2"), &models).map_err(|e| e.to_string())?;
    ensure!(first.manifest.run_files == second.manifest.run_files, "different run file sets");
    for f in &first.manifest.run_files {
        let a = fs::read(dir.path().join("run1").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dir.path().join("run2").join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{f} differs between identical runs");
    }
    ensure!(first.manifest.corpus_hash == second.manifest.corpus_hash, "corpus hash differs");
    Ok(format!(
        "{checked} trace_full lists inside their candidate sets; {} run files byte-identical",
        first.manifest.run_files.len()
    ))
}

// ---------------------------------------------------------------------------

fn planted_relevance() -> Outcome {
    let planted = common::planted_corpus(22);
    ensure!(planted.corpus.len() == 500, "corpus has {} documents", planted.corpus.len());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_corpus(&planted.corpus, dir.path().join("planted.jsonl")).map_err(|e| e.to_string())?;
    let models = Models::stub(precedent::vector::DEFAULT_DIMENSION, Annotator::File);
    let cfg = ExperimentConfig {
        presets: vec!["full".into()],
        methods: vec![Method::TraceFull],
        ..planted_config(dir.path(), "planted")
    };
    let arts = run_experiment_with(&cfg, &models).map_err(|e| e.to_string())?;
    let row = arts
        .report
        .rows
        .iter()
        .find(|r| r.k == 10)
        .ok_or("no k=10 row")?;
    ensure!(row.n_queries == 50, "{} queries scored", row.n_queries);

    // Shuffled-ranking baseline over the same candidate population.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let all: Vec<&str> = planted.corpus.iter().map(|d| d.doc_id.as_str()).collect();
    let (mut base_recall, mut base_mrr) = (0.0, 0.0);
    for (q, rel) in &planted.relevant {
        let mut ranking: Vec<&str> = all.iter().copied().filter(|d| d != q).collect();
        ranking.shuffle(&mut rng);
        base_recall += recall_at_k(&ranking, rel, 10);
        base_mrr += reciprocal_rank(&ranking, rel);
    }
    let n = planted.relevant.len() as f64;
    base_recall /= n;
    base_mrr /= n;
    let detail = format!(
        "trace_full Recall@10 {:.3} MRR {:.3} MAP {:.3}; shuffled Recall@10 {:.3} MRR {:.3}",
        row.recall, row.mrr, row.map, base_recall, base_mrr
    );
    ensure!(row.recall >= 0.9, "{detail}");
    ensure!(row.mrr >= 0.6, "{detail}");
    ensure!(row.recall > base_recall && row.mrr > base_mrr, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn token_counts(text: &str) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in text.split_whitespace() {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn role_filter_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let docs: Vec<Document> = (0..1000).map(|i| common::random_annotated(&mut rng, i)).collect();
    let configs: Vec<RoleConfig> = RolePreset::ALL.into_iter().map(RoleConfig::preset).collect();
    let mut pairs = 0;
    for doc in &docs {
        let built: Vec<_> = configs
            .iter()
            .map(|c| build_role_query(doc, c))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for (cfg, q) in configs.iter().zip(&built) {
            // Every token names its sentence, so the output shows exactly
            // which sentences were kept.
            let kept: BTreeSet<usize> = q
                .text
                .split_whitespace()
                .map(|t| t[1..t.find('t').unwrap()].parse().unwrap())
                .collect();
            for s in &doc.sentences {
                let included = cfg.includes(s.role);
                ensure!(
                    kept.contains(&s.index) == included,
                    "{} / {}: sentence {} ({}) kept={} but role included={included}",
                    doc.doc_id, cfg.name, s.index, s.role, kept.contains(&s.index)
                );
            }
            let expected: Vec<&str> = doc.sentences.iter().filter(|s| cfg.includes(s.role)).map(|s| s.text.as_str()).collect();
            ensure!(q.text == expected.join(" "), "{} / {}: text or order differs", doc.doc_id, cfg.name);
        }
        for (a, qa) in configs.iter().zip(&built) {
            for (b, qb) in configs.iter().zip(&built) {
                if a.included_roles.is_subset(&b.included_roles) {
                    let (ca, cb) = (token_counts(&qa.text), token_counts(&qb.text));
                    for (t, n) in &ca {
                        ensure!(cb.get(t).copied().unwrap_or(0) >= *n, "{}: {} ⊆ {} but token {t} lost", doc.doc_id, a.name, b.name);
                    }
                    pairs += 1;
                }
            }
        }
    }
    Ok(format!("1000 documents × 6 presets; {pairs} subset pairs monotone"))
}

// ---------------------------------------------------------------------------

fn report_shape() -> Outcome {
    let planted = common::planted_corpus(23);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_corpus(&planted.corpus, dir.path().join("planted.jsonl")).map_err(|e| e.to_string())?;
    let models = Models::stub(precedent::vector::DEFAULT_DIMENSION, Annotator::File);
    let cfg = planted_config(dir.path(), "shape");
    ensure!(cfg.presets.len() == 6 && cfg.methods.len() == 3, "default config is not 6 × 3");
    let arts = run_experiment_with(&cfg, &models).map_err(|e| e.to_string())?;
    let best = &arts.report.best;
    ensure!(best.len() == 18, "{} best-k rows", best.len());
    let combos: BTreeSet<(&str, &str)> = best.iter().map(|r| (r.config.as_str(), r.method.as_str())).collect();
    ensure!(combos.len() == 18, "best-k rows are not 18 distinct (config, method) pairs");

    let table = fs::read_to_string(arts.output_dir.join("report.txt")).map_err(|e| e.to_string())?;
    let header: Vec<&str> = table.lines().next().unwrap_or("").split_whitespace().collect();
    ensure!(header.len() >= REPORT_COLUMNS.len(), "short header {header:?}");
    let metric_cols = &header[header.len() - REPORT_COLUMNS.len()..];
    ensure!(metric_cols == REPORT_COLUMNS, "columns {metric_cols:?}");
    ensure!(table.lines().count() == 2 + 18, "table has {} lines", table.lines().count());

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(arts.output_dir.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure!(json["best"].as_array().map(Vec::len) == Some(18), "report.json best rows");
    ensure!(
        fs::read_dir(arts.output_dir.join(RUNS_DIR)).map_err(|e| e.to_string())?.count() == 18,
        "expected 18 run files"
    );
    Ok(format!("18 best-k rows; columns {}", REPORT_COLUMNS.join(" ")))
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Option<Duration>, fn() -> Outcome)> = vec![
        ("metric oracle equivalence", Some(Duration::from_secs(5)), metric_oracle),
        ("rrf correctness", Some(Duration::from_secs(2)), rrf_oracle),
        ("bm25 reference equivalence", None, bm25_reference),
        ("vector search exactness", None, vector_exactness),
        ("pipeline containment and determinism", None, containment_and_determinism),
        ("planted-relevance end-to-end", Some(Duration::from_secs(60)), planted_relevance),
        ("role-filter contract", None, role_filter_contract),
        ("report shape", None, report_shape),
    ];
    let failed: Vec<&str> = criteria
        .into_iter()
        .filter(|(name, limit, f)| !run_criterion(name, *limit, *f))
        .map(|(name, ..)| name)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
